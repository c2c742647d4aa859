//! Seeded generator of class-conditional synthetic 3D tumor label maps.
//!
//! Each subject is a nested three-structure tumor: a random-center ellipsoid
//! whose boundary radius is modulated by smooth band-limited noise on the
//! sphere, with inner structures at fixed fractions of the outer radius so
//! label nesting holds by construction.  The class signal lives in boundary
//! roughness (short survivors most irregular, mirroring the qualitative
//! short-vs-long shape contrast) plus a mild size signal (short survivors
//! slightly larger); survival days are drawn uniformly inside each class's
//! day band so the generating class is always recoverable from the days.
//!
//! Determinism: subject `i` of a dataset draws only from the counter-based
//! substream `(seed, STREAM_SYNTH, i, variant)`, so generation order and
//! worker count never change the output.  Variant 0 is the subject itself;
//! higher variants redraw only the boundary noise, producing the
//! segmenter-disagreement-style perturbed copies used by the S1 regime.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{block_rng, STREAM_SYNTH};
use crate::types::{SurvivalClass, CLASS_COUNT};
use crate::volumes::{flip_lr, write_raw, DatasetManifest, ManifestRecord, RemapTable, SegVolume};

/// Shape and survival parameters for one survival class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShapeSpec {
    /// Base ellipsoid radius range in voxels.
    pub base_radius_range: [f64; 2],
    /// Boundary perturbation amplitude in [0, 1): fraction of the radius.
    pub roughness: f64,
    /// Per-axis eccentricity draw range; draws are product-normalized.
    pub eccentricity_range: [f64; 2],
    /// Center of the uniform survival-day distribution.
    pub day_mean: f64,
    /// Half-width of the uniform survival-day distribution.
    pub day_spread: f64,
}

/// Full generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Native volume shape the subjects are rendered into.
    pub shape: [usize; 3],
    /// Per-class parameters, indexed short, mid, long.
    pub classes: [ClassShapeSpec; CLASS_COUNT],
    /// Inner-structure radius fractions: enhancing ≤ m0 < core ≤ m1 < whole ≤ 1.
    pub nesting_margins: [f64; 2],
    /// Uniform ± jitter of the tumor center per axis, in voxels.
    pub center_jitter: [f64; 3],
    /// Number of band-limited boundary noise terms.
    pub noise_terms: usize,
    /// Angular frequency range of the boundary noise.
    pub frequency_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shape: [64, 64, 48],
            classes: [
                ClassShapeSpec {
                    base_radius_range: [6.0, 7.2],
                    roughness: 0.35,
                    eccentricity_range: [0.9, 1.12],
                    day_mean: 150.0,
                    day_spread: 100.0,
                },
                ClassShapeSpec {
                    base_radius_range: [5.2, 6.4],
                    roughness: 0.18,
                    eccentricity_range: [0.9, 1.12],
                    day_mean: 380.0,
                    day_spread: 70.0,
                },
                ClassShapeSpec {
                    base_radius_range: [4.4, 5.6],
                    roughness: 0.06,
                    eccentricity_range: [0.9, 1.12],
                    day_mean: 600.0,
                    day_spread: 120.0,
                },
            ],
            nesting_margins: [0.45, 0.7],
            center_jitter: [2.0, 2.0, 1.0],
            noise_terms: 6,
            frequency_range: [4.0, 12.0],
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Geometry matching the real preprocessing pipeline's native inputs.
    pub fn brats_scale() -> Self {
        let mut spec = SynthSpec::default();
        spec.shape = [240, 240, 155];
        spec.center_jitter = [8.0, 8.0, 4.0];
        for class in &mut spec.classes {
            class.base_radius_range = [
                class.base_radius_range[0] * 4.0,
                class.base_radius_range[1] * 4.0,
            ];
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 8) {
            return Err(Error::InvalidConfig(format!(
                "volume shape {:?} too small to render tumors",
                self.shape
            )));
        }
        let [m0, m1] = self.nesting_margins;
        if !(0.0 < m0 && m0 < m1 && m1 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nesting margins must satisfy 0 < m0 < m1 < 1, got {:?}",
                self.nesting_margins
            )));
        }
        if self.noise_terms == 0 {
            return Err(Error::InvalidConfig("noise term count must be positive".into()));
        }
        let [f0, f1] = self.frequency_range;
        if !(f0.is_finite() && f1.is_finite() && 0.0 < f0 && f0 <= f1) {
            return Err(Error::InvalidConfig(format!(
                "frequency range must satisfy 0 < lo <= hi, got {:?}",
                self.frequency_range
            )));
        }
        if self.center_jitter.iter().any(|j| !j.is_finite() || *j < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "center jitter must be finite and non-negative, got {:?}",
                self.center_jitter
            )));
        }
        let mut last_roughness = f64::INFINITY;
        for (class, cs) in SurvivalClass::ALL.iter().zip(&self.classes) {
            let [r0, r1] = cs.base_radius_range;
            if !(r0.is_finite() && r1.is_finite() && 0.0 < r0 && r0 <= r1) {
                return Err(Error::InvalidConfig(format!(
                    "{} base radius range must satisfy 0 < lo <= hi, got {:?}",
                    class.name(),
                    cs.base_radius_range
                )));
            }
            if !(0.0..1.0).contains(&cs.roughness) {
                return Err(Error::InvalidConfig(format!(
                    "{} roughness must lie in [0, 1), got {}",
                    class.name(),
                    cs.roughness
                )));
            }
            if cs.roughness >= last_roughness {
                return Err(Error::InvalidConfig(
                    "roughness must be strictly decreasing short -> mid -> long".into(),
                ));
            }
            last_roughness = cs.roughness;
            let [e0, e1] = cs.eccentricity_range;
            if !(e0.is_finite() && e1.is_finite() && 0.0 < e0 && e0 <= e1) {
                return Err(Error::InvalidConfig(format!(
                    "{} eccentricity range must satisfy 0 < lo <= hi, got {:?}",
                    class.name(),
                    cs.eccentricity_range
                )));
            }
            if !cs.day_mean.is_finite() || !cs.day_spread.is_finite() || cs.day_spread < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{} day distribution must be finite with spread >= 0",
                    class.name()
                )));
            }
            let lo = cs.day_mean - cs.day_spread;
            let hi = cs.day_mean + cs.day_spread;
            if lo < 0.0
                || SurvivalClass::from_days(lo) != *class
                || SurvivalClass::from_days(hi) != *class
            {
                return Err(Error::InvalidConfig(format!(
                    "{} day distribution [{lo}, {hi}] leaves the class's day band",
                    class.name()
                )));
            }
        }
        Ok(())
    }
}

/// Scale-normalized surface irregularity score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RoughnessStat(pub f64);

/// Boundary voxel count over tumor voxel count^(2/3).
///
/// A tumor voxel is a boundary voxel when at least one of its 6 face
/// neighbors is background (voxels beyond the array edge count as background).
pub fn roughness(v: &SegVolume) -> Result<RoughnessStat> {
    let data = v.data();
    let (n1, n2, n3) = data.dim();
    let mut tumor = 0usize;
    let mut boundary = 0usize;
    for ((i, j, k), &label) in data.indexed_iter() {
        if label == 0 {
            continue;
        }
        tumor += 1;
        let at = |i: isize, j: isize, k: isize| -> u8 {
            if i < 0 || j < 0 || k < 0 || i >= n1 as isize || j >= n2 as isize || k >= n3 as isize {
                0
            } else {
                data[[i as usize, j as usize, k as usize]]
            }
        };
        let (i, j, k) = (i as isize, j as isize, k as isize);
        if at(i - 1, j, k) == 0
            || at(i + 1, j, k) == 0
            || at(i, j - 1, k) == 0
            || at(i, j + 1, k) == 0
            || at(i, j, k - 1) == 0
            || at(i, j, k + 1) == 0
        {
            boundary += 1;
        }
    }
    if tumor == 0 {
        return Err(Error::InvalidConfig(
            "roughness requires at least one tumor voxel".into(),
        ));
    }
    let norm = (tumor as f64).cbrt().powi(2);
    Ok(RoughnessStat(boundary as f64 / norm))
}

struct Structural {
    base_radius: f64,
    ecc: [f64; 3],
    center: [f64; 3],
    days: f64,
}

struct NoiseTerm {
    direction: [f64; 3],
    omega: f64,
    phase: f64,
    coeff: f64,
}

fn uniform_in(rng: &mut ChaCha12Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn draw_structural(cs: &ClassShapeSpec, spec: &SynthSpec, rng: &mut ChaCha12Rng) -> Structural {
    let base_radius = uniform_in(rng, cs.base_radius_range);
    let mut ecc = [0.0; 3];
    for e in &mut ecc {
        *e = uniform_in(rng, cs.eccentricity_range);
    }
    let norm = (ecc[0] * ecc[1] * ecc[2]).cbrt();
    for e in &mut ecc {
        *e /= norm;
    }
    let mut center = [0.0; 3];
    for axis in 0..3 {
        let j = spec.center_jitter[axis];
        center[axis] = (spec.shape[axis] - 1) as f64 / 2.0
            + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
    }
    let days = uniform_in(
        rng,
        [cs.day_mean - cs.day_spread, cs.day_mean + cs.day_spread],
    );
    Structural { base_radius, ecc, center, days }
}

fn draw_noise(spec: &SynthSpec, rng: &mut ChaCha12Rng) -> Vec<NoiseTerm> {
    (0..spec.noise_terms)
        .map(|_| {
            let mut direction = [0.0; 3];
            loop {
                for d in &mut direction {
                    *d = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for d in &mut direction {
                        *d /= norm;
                    }
                    break;
                }
            }
            NoiseTerm {
                direction,
                omega: uniform_in(rng, spec.frequency_range),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                coeff: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

fn render(
    class: SurvivalClass,
    spec: &SynthSpec,
    structural: &Structural,
    noise: &[NoiseTerm],
) -> Result<SegVolume> {
    let cs = &spec.classes[class.index()];
    let max_radius = structural.base_radius
        * structural.ecc.iter().cloned().fold(0.0, f64::max)
        * (1.0 + cs.roughness);
    for axis in 0..3 {
        if structural.center[axis] - max_radius < 0.0
            || structural.center[axis] + max_radius > (spec.shape[axis] - 1) as f64
        {
            return Err(Error::InvalidConfig(format!(
                "volume shape {:?} too small to fit base radius {:.2}",
                spec.shape, structural.base_radius
            )));
        }
    }
    let coeff_norm: f64 = noise.iter().map(|t| t.coeff.abs()).sum();
    let semi: Vec<f64> = structural.ecc.iter().map(|e| e * structural.base_radius).collect();
    let [m0, m1] = spec.nesting_margins;
    let mut data = Array3::<u8>::zeros((spec.shape[0], spec.shape[1], spec.shape[2]));
    for ((i, j, k), voxel) in data.indexed_iter_mut() {
        let d = [
            i as f64 - structural.center[0],
            j as f64 - structural.center[1],
            k as f64 - structural.center[2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r < 1e-9 {
            *voxel = 3;
            continue;
        }
        if r > max_radius {
            continue;
        }
        let u = [d[0] / r, d[1] / r, d[2] / r];
        let inv_sq: f64 = u
            .iter()
            .zip(&semi)
            .map(|(ui, ai)| (ui / ai) * (ui / ai))
            .sum();
        let r_ell = 1.0 / inv_sq.sqrt();
        let texture = if coeff_norm < 1e-9 {
            0.0
        } else {
            noise
                .iter()
                .map(|t| {
                    let dot = t.direction[0] * u[0] + t.direction[1] * u[1] + t.direction[2] * u[2];
                    t.coeff * (t.omega * dot + t.phase).cos()
                })
                .sum::<f64>()
                / coeff_norm
        };
        let boundary = r_ell * (1.0 + cs.roughness * texture);
        let rho = r / boundary;
        *voxel = if rho <= m0 {
            3
        } else if rho <= m1 {
            2
        } else if rho <= 1.0 {
            1
        } else {
            0
        };
    }
    SegVolume::new(data)
}

/// Render one subject of the given class; returns the label map and its
/// survival days.  All randomness comes from `rng`, so the same
/// (class, spec, rng state) reproduces the subject exactly.
pub fn generate_subject(
    class: SurvivalClass,
    spec: &SynthSpec,
    rng: &mut ChaCha12Rng,
) -> Result<(SegVolume, f64)> {
    spec.validate()?;
    let structural = draw_structural(&spec.classes[class.index()], spec, rng);
    let noise = draw_noise(spec, rng);
    let volume = render(class, spec, &structural, &noise)?;
    Ok((volume, structural.days))
}

/// Dataset composition options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Relative class weights for subject class draws (short, mid, long).
    pub class_balance: [f64; CLASS_COUNT],
    /// Append a left-right-flipped copy of every unlabeled record.
    pub flip_unlabeled: bool,
    /// Extra boundary-noise re-renderings per unlabeled subject (S1-style
    /// segmenter-disagreement emulation).
    pub perturb_copies: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n_labeled: 0,
            n_unlabeled: 0,
            class_balance: [1.0; CLASS_COUNT],
            flip_unlabeled: false,
            perturb_copies: 0,
        }
    }
}

impl GenerateOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_labeled + self.n_unlabeled == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs at least one subject".into(),
            ));
        }
        let sum: f64 = self.class_balance.iter().sum();
        if self.class_balance.iter().any(|w| !w.is_finite() || *w < 0.0) || sum <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "class balance must be non-negative weights with positive sum, got {:?}",
                self.class_balance
            )));
        }
        Ok(())
    }
}

/// Name of the hidden ground-truth file written next to the manifest.
/// Training code never reads it; it exists so evaluation can score
/// predictions on nominally unlabeled records.
pub const ANSWERS_FILE: &str = "answers.csv";

/// Name of the manifest file written by [`generate_dataset`].
pub const MANIFEST_FILE: &str = "manifest.csv";

/// One row of the hidden answers file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub subject_id: String,
    pub true_class: SurvivalClass,
    pub true_days: f64,
}

/// Read back an answers file written by [`generate_dataset`].
pub fn read_answers(path: &Path) -> Result<Vec<AnswerRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn draw_class(balance: &[f64; CLASS_COUNT], rng: &mut ChaCha12Rng) -> SurvivalClass {
    let total: f64 = balance.iter().sum();
    let u = rng.random_range(0.0..total);
    let mut cum = 0.0;
    for (i, w) in balance.iter().enumerate() {
        cum += w;
        if u < cum {
            return SurvivalClass::from_index(i).expect("class index");
        }
    }
    SurvivalClass::Long
}

/// Generate a dataset on disk: volumes, manifest, and the hidden answers file.
///
/// Subject `i` draws exclusively from `(seed, STREAM_SYNTH, i, variant)`, so
/// the same (spec, options, seed) always produces byte-identical files.
pub fn generate_dataset(
    spec: &SynthSpec,
    opts: &GenerateOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    opts.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::new();
    let mut answers = Vec::new();
    let write_volume = |id: &str, volume: &SegVolume| -> Result<String> {
        let file = format!("{id}.vol");
        write_raw(&out_dir.join(&file), volume.data(), Some(&RemapTable::identity()))?;
        Ok(file)
    };

    for idx in 0..opts.n_labeled + opts.n_unlabeled {
        let labeled = idx < opts.n_labeled;
        let id = if labeled {
            format!("synth_l{idx:04}")
        } else {
            format!("synth_u{:04}", idx - opts.n_labeled)
        };
        let mut rng = block_rng(seed, STREAM_SYNTH, idx as u64, 0);
        let class = draw_class(&opts.class_balance, &mut rng);
        let (volume, days) = generate_subject(class, spec, &mut rng)?;
        let file = write_volume(&id, &volume)?;
        if labeled {
            records.push(ManifestRecord::labeled(&id, &file, days));
        } else {
            records.push(ManifestRecord::unlabeled(&id, &file));
            for variant in 1..=opts.perturb_copies {
                let mut srng = block_rng(seed, STREAM_SYNTH, idx as u64, 0);
                let _ = draw_class(&opts.class_balance, &mut srng);
                let structural = draw_structural(&spec.classes[class.index()], spec, &mut srng);
                let mut nrng = block_rng(seed, STREAM_SYNTH, idx as u64, variant as u64);
                let noise = draw_noise(spec, &mut nrng);
                let copy = render(class, spec, &structural, &noise)?;
                let copy_id = format!("{id}_p{variant}");
                let copy_file = write_volume(&copy_id, &copy)?;
                records.push(ManifestRecord::unlabeled(&copy_id, &copy_file));
                answers.push(AnswerRow {
                    subject_id: copy_id,
                    true_class: class,
                    true_days: days,
                });
            }
        }
        answers.push(AnswerRow { subject_id: id, true_class: class, true_days: days });
    }

    if opts.flip_unlabeled {
        let unlabeled: Vec<ManifestRecord> = records
            .iter()
            .filter(|r| !r.is_labeled())
            .cloned()
            .collect();
        for record in unlabeled {
            let volume = crate::volumes::load_label_volume(
                &out_dir.join(&record.volume_path),
                None,
            )?;
            let flip_id = format!("{}_flip", record.subject_id);
            let file = write_volume(&flip_id, &flip_lr(&volume))?;
            records.push(ManifestRecord::unlabeled(&flip_id, &file));
            let base = answers
                .iter()
                .find(|a| a.subject_id == record.subject_id)
                .expect("answer row for every record");
            answers.push(AnswerRow {
                subject_id: flip_id,
                true_class: base.true_class,
                true_days: base.true_days,
            });
        }
    }

    let manifest = DatasetManifest::new(records)?;
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    let answers_path = out_dir.join(ANSWERS_FILE);
    let mut writer = csv::Writer::from_path(&answers_path).map_err(Error::from)?;
    for row in &answers {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(&answers_path, e))?;
    Ok(manifest.with_base_dir(out_dir))
}
