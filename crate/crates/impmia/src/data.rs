//! Synthetic data generation and attack-scenario construction.
//!
//! Gaussian mixtures stand in for image data at desk scale. Class means are
//! drawn once per seed, orthogonalized so classes stay pairwise separated,
//! and symmetrized under the horizontal flip in image-shaped mode so that
//! flipped samples follow the same distribution as originals.
//!
//! Membership ground truth is kept out of the candidate pool type on
//! purpose: attack code consumes [`CandidatePool`], while origin tags travel
//! separately as [`MembershipTags`] for the evaluator.

use crate::nn::flip_features;
use crate::seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
}

/// Ground-truth provenance of a sample. Visible to the evaluator only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Member,
    InDistNonmember,
    OodNonmember,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Member => "member",
            Origin::InDistNonmember => "in_dist_nonmember",
            Origin::OodNonmember => "ood_nonmember",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "member" => Ok(Origin::Member),
            "in_dist_nonmember" => Ok(Origin::InDistNonmember),
            "ood_nonmember" => Ok(Origin::OodNonmember),
            other => Err(DataError::Malformed(format!("unknown origin {other:?}"))),
        }
    }
}

/// A generated sample with its hidden provenance tag.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
    pub origin: Origin,
}

/// One candidate as the attack sees it: features and label, no provenance.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
}

/// The candidate superset handed to attacks.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub samples: Vec<PoolEntry>,
    pub d: usize,
    pub classes: usize,
    pub image_shaped: bool,
}

impl CandidatePool {
    /// Grid width when the features form a square image.
    pub fn image_width(&self) -> Option<usize> {
        if !self.image_shaped {
            return None;
        }
        let w = (self.d as f64).sqrt().round() as usize;
        (w * w == self.d).then_some(w)
    }
}

/// Evaluator-side ground truth: sample id to origin.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MembershipTags(pub BTreeMap<u64, Origin>);

impl MembershipTags {
    pub fn is_member(&self, id: u64) -> Option<bool> {
        self.0.get(&id).map(|o| *o == Origin::Member)
    }
}

/// The in-distribution generator: `classes` isotropic unit-variance Gaussian
/// clusters whose mean norms equal `separation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    pub image_shaped: bool,
}

impl MixtureSpec {
    pub fn image_width(&self) -> Option<usize> {
        if !self.image_shaped {
            return None;
        }
        let w = (self.d as f64).sqrt().round() as usize;
        (w * w == self.d).then_some(w)
    }

    /// Deterministic class means. Directions are drawn from the seed's
    /// "means" stream, flip-symmetrized in image mode, orthogonalized while
    /// possible, and scaled to `separation`.
    pub fn class_means(&self, seed_value: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "means"));
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        let mut attempts = 0;
        while means.len() < self.classes {
            let mut v: Vec<f64> = (0..self.d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            if let Some(w) = self.image_width() {
                let flipped = flip_features(&v, w);
                for (a, b) in v.iter_mut().zip(&flipped) {
                    *a = (*a + b) / 2.0;
                }
            }
            // Gram-Schmidt against accepted means keeps classes apart.
            attempts += 1;
            if attempts < 64 {
                for m in &means {
                    let proj: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                    for (a, b) in v.iter_mut().zip(m) {
                        *a -= proj * b;
                    }
                }
            }
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for a in &mut v {
                *a /= norm;
            }
            means.push(v);
        }
        for m in &mut means {
            for a in m {
                *a *= self.separation;
            }
        }
        means
    }
}

/// Mean translation and covariance scaling of the OOD generator relative to
/// the in-distribution mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodShift {
    pub mean_shift: f64,
    pub cov_scale: f64,
}

impl OodShift {
    pub fn identity() -> Self {
        Self {
            mean_shift: 0.0,
            cov_scale: 1.0,
        }
    }
}

/// Draw mixture samples around the given class means. `counts[c]` samples
/// are generated for class `c`, in class order, ids 0..n.
fn gen_around_means(means: &[Vec<f64>], counts: &[usize], sample_seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..counts[c] {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(LabeledSample {
                id: out.len() as u64,
                x,
                y: c,
                origin: Origin::InDistNonmember,
            });
        }
    }
    out
}

/// Split a total count over classes as evenly as possible, extras going to
/// the first classes.
fn split_counts(total: usize, classes: usize) -> Vec<usize> {
    let base = total / classes;
    let extra = total % classes;
    (0..classes).map(|c| base + usize::from(c < extra)).collect()
}

/// Draw `n_per_class` samples around each class mean. Ids run 0..n in
/// generation order; callers composing datasets reassign them.
pub fn gen_gaussian_mixture(
    spec: &MixtureSpec,
    n_per_class: usize,
    seed_value: u64,
) -> Vec<LabeledSample> {
    let means = spec.class_means(seed_value);
    gen_around_means(
        &means,
        &vec![n_per_class; spec.classes],
        seed::derive(seed_value, "mixture"),
    )
}

/// OOD draws around the given means: each sample starts from a random class
/// mean, is translated along a fixed seeded direction by `mean_shift`, and
/// gets `cov_scale`-scaled isotropic noise. Labels follow the nearest
/// in-distribution class mean, which is the documented convention for pool
/// labels of OOD entries.
fn gen_ood_around(
    means: &[Vec<f64>],
    d: usize,
    n: usize,
    shift: OodShift,
    sample_seed: u64,
) -> Vec<LabeledSample> {
    let mut dir_rng = ChaCha8Rng::seed_from_u64(seed::derive(sample_seed, "ood-dir"));
    let mut dir: Vec<f64> = (0..d).map(|_| dir_rng.sample::<f64, _>(StandardNormal)).collect();
    let norm: f64 = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
    for a in &mut dir {
        *a /= norm.max(1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(sample_seed, "ood"));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..means.len());
        let x: Vec<f64> = means[c]
            .iter()
            .zip(&dir)
            .map(|(&m, &dv)| {
                m + shift.mean_shift * dv
                    + shift.cov_scale * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let y = nearest_mean(&x, means);
        out.push(LabeledSample {
            id: i as u64,
            x,
            y,
            origin: Origin::OodNonmember,
        });
    }
    out
}

/// Standalone OOD generator; means derive from the same seed.
pub fn gen_ood(spec: &MixtureSpec, n: usize, shift: OodShift, seed_value: u64) -> Vec<LabeledSample> {
    let means = spec.class_means(seed_value);
    gen_ood_around(&means, spec.d, n, shift, seed_value)
}

fn nearest_mean(x: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in means.iter().enumerate() {
        let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Which assumption-removal scenario to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Standard,
    DifferentDistribution,
    UnknownRatio,
    PartialCoverage,
    Combined,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Standard => "standard",
            ScenarioKind::DifferentDistribution => "different_distribution",
            ScenarioKind::UnknownRatio => "unknown_ratio",
            ScenarioKind::PartialCoverage => "partial_coverage",
            ScenarioKind::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "standard" => Ok(ScenarioKind::Standard),
            "different_distribution" => Ok(ScenarioKind::DifferentDistribution),
            "unknown_ratio" => Ok(ScenarioKind::UnknownRatio),
            "partial_coverage" => Ok(ScenarioKind::PartialCoverage),
            "combined" => Ok(ScenarioKind::Combined),
            other => Err(DataError::Malformed(format!("unknown scenario kind {other:?}"))),
        }
    }
}

/// Full recipe for one attack scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub mixture: MixtureSpec,
    pub n_members: usize,
    pub n_in_dist_nonmembers: usize,
    pub n_ood: usize,
    pub coverage_fraction: f64,
    pub ood_shift: OodShift,
    pub seed: u64,
}

impl ScenarioConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.n_members == 0 {
            return Err(DataError::Infeasible("n_members must be positive".into()));
        }
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
            return Err(DataError::Infeasible(format!(
                "coverage_fraction {} outside (0, 1]",
                self.coverage_fraction
            )));
        }
        let full_coverage = self.coverage_fraction == 1.0;
        match self.kind {
            ScenarioKind::Standard => {
                if self.n_ood != 0 {
                    return Err(DataError::Infeasible("standard scenario requires n_ood = 0".into()));
                }
                if self.n_members != self.n_in_dist_nonmembers {
                    return Err(DataError::Infeasible(
                        "standard scenario requires a 1:1 member:nonmember ratio".into(),
                    ));
                }
                if !full_coverage {
                    return Err(DataError::Infeasible(
                        "standard scenario requires full coverage".into(),
                    ));
                }
            }
            ScenarioKind::UnknownRatio => {
                if self.n_ood != 0 || !full_coverage {
                    return Err(DataError::Infeasible(
                        "unknown_ratio scenario requires n_ood = 0 and full coverage".into(),
                    ));
                }
            }
            ScenarioKind::DifferentDistribution => {
                if self.n_ood == 0 {
                    return Err(DataError::Infeasible(
                        "different_distribution scenario requires n_ood > 0".into(),
                    ));
                }
                if !full_coverage {
                    return Err(DataError::Infeasible(
                        "different_distribution scenario requires full coverage".into(),
                    ));
                }
            }
            ScenarioKind::PartialCoverage => {
                if self.n_ood != 0 {
                    return Err(DataError::Infeasible(
                        "partial_coverage scenario requires n_ood = 0".into(),
                    ));
                }
            }
            ScenarioKind::Combined => {
                if self.n_ood == 0 {
                    return Err(DataError::Infeasible(
                        "combined scenario requires n_ood > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A built scenario: the full training set, the candidate pool the attack
/// sees, and the evaluator-only tags.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub train_set: Vec<LabeledSample>,
    pub pool: CandidatePool,
    pub tags: MembershipTags,
}

/// Assemble a scenario. The training set is always the full member draw;
/// `coverage_fraction` controls how many members enter the pool. Pool order
/// is a seeded shuffle and ids are globally unique.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, DataError> {
    cfg.validate()?;

    // One set of class means per scenario; members, in-distribution
    // non-members, and the OOD generator all reference it.
    let means = cfg.mixture.class_means(cfg.seed);
    let mut members = gen_around_means(
        &means,
        &split_counts(cfg.n_members, cfg.mixture.classes),
        seed::derive(cfg.seed, "members"),
    );
    let mut nonmembers = gen_around_means(
        &means,
        &split_counts(cfg.n_in_dist_nonmembers, cfg.mixture.classes),
        seed::derive(cfg.seed, "nonmembers"),
    );
    let mut ood = gen_ood_around(
        &means,
        cfg.mixture.d,
        cfg.n_ood,
        cfg.ood_shift,
        seed::derive(cfg.seed, "ood"),
    );

    let mut next_id = 0u64;
    for s in &mut members {
        s.id = next_id;
        s.origin = Origin::Member;
        next_id += 1;
    }
    for s in &mut nonmembers {
        s.id = next_id;
        next_id += 1;
    }
    for s in &mut ood {
        s.id = next_id;
        next_id += 1;
    }

    // Coverage: only a seeded subset of members enters the pool.
    let n_covered = ((cfg.coverage_fraction * cfg.n_members as f64) + 0.5).floor() as usize;
    let n_covered = n_covered.min(cfg.n_members);
    let mut order: Vec<usize> = (0..cfg.n_members).collect();
    let mut cov_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "coverage"));
    for i in (1..order.len()).rev() {
        let j = cov_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let covered: Vec<&LabeledSample> = order[..n_covered].iter().map(|&i| &members[i]).collect();

    let mut pool_samples: Vec<LabeledSample> = Vec::new();
    pool_samples.extend(covered.into_iter().cloned());
    pool_samples.extend(nonmembers.iter().cloned());
    pool_samples.extend(ood.iter().cloned());

    let mut shuf_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "shuffle"));
    for i in (1..pool_samples.len()).rev() {
        let j = shuf_rng.random_range(0..=i);
        pool_samples.swap(i, j);
    }

    let tags = MembershipTags(pool_samples.iter().map(|s| (s.id, s.origin)).collect());
    let pool = CandidatePool {
        d: cfg.mixture.d,
        classes: cfg.mixture.classes,
        image_shaped: cfg.mixture.image_shaped,
        samples: pool_samples
            .into_iter()
            .map(|s| PoolEntry {
                id: s.id,
                x: s.x,
                y: s.y,
            })
            .collect(),
    };
    Ok(Scenario {
        train_set: members,
        pool,
        tags,
    })
}

// ---------------------------------------------------------------------------
// Dataset files: textual header + little-endian binary rows, with a separate
// textual sidecar for membership tags.
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &str = "impmia-dataset v1";
const TAGS_MAGIC: &str = "# impmia-tags v1";

/// Write samples as a dataset file. Works for both pool and train-set files;
/// origin tags never enter this file.
pub fn save_dataset(
    path: &Path,
    d: usize,
    classes: usize,
    seed_value: u64,
    image_shaped: bool,
    rows: &[(u64, usize, &[f64])],
    extra: &[(String, String)],
) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "d = {d}")?;
    writeln!(w, "classes = {classes}")?;
    writeln!(w, "n = {}", rows.len())?;
    writeln!(w, "seed = {seed_value}")?;
    writeln!(w, "image_shaped = {image_shaped}")?;
    for (k, v) in extra {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w, "end-header")?;
    for (id, y, x) in rows {
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&(*y as u64).to_le_bytes())?;
        for v in *x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loaded dataset file contents.
pub struct DatasetFile {
    pub d: usize,
    pub classes: usize,
    pub seed: u64,
    pub image_shaped: bool,
    pub rows: Vec<PoolEntry>,
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != DATASET_MAGIC {
        return Err(DataError::Malformed(format!("bad magic: {:?}", line.trim_end())));
    }
    let mut d = None;
    let mut classes = None;
    let mut n = None;
    let mut seed_value = 0u64;
    let mut image_shaped = false;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(DataError::Malformed("missing end-header".into()));
        }
        let t = line.trim_end();
        if t == "end-header" {
            break;
        }
        let Some((k, v)) = t.split_once(" = ") else {
            return Err(DataError::Malformed(format!("bad header line: {t:?}")));
        };
        match k {
            "d" => d = Some(parse_count(v)?),
            "classes" => classes = Some(parse_count(v)?),
            "n" => n = Some(parse_count(v)?),
            "seed" => {
                seed_value = v
                    .parse()
                    .map_err(|_| DataError::Malformed(format!("bad seed: {v:?}")))?
            }
            "image_shaped" => {
                image_shaped = v
                    .parse()
                    .map_err(|_| DataError::Malformed(format!("bad image_shaped: {v:?}")))?
            }
            _ => {}
        }
    }
    let d = d.ok_or_else(|| DataError::Malformed("missing d".into()))?;
    let classes = classes.ok_or_else(|| DataError::Malformed("missing classes".into()))?;
    let n = n.ok_or_else(|| DataError::Malformed("missing n".into()))?;
    let row_bytes = 16 + 8 * d;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * row_bytes {
        return Err(DataError::Malformed(format!(
            "expected {} data bytes, found {}",
            n * row_bytes,
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(row_bytes) {
        let id = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let y = u64::from_le_bytes(chunk[8..16].try_into().unwrap()) as usize;
        if y >= classes {
            return Err(DataError::Malformed(format!("label {y} out of range")));
        }
        let x: Vec<f64> = chunk[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        rows.push(PoolEntry { id, x, y });
    }
    Ok(DatasetFile {
        d,
        classes,
        seed: seed_value,
        image_shaped,
        rows,
    })
}

fn parse_count(v: &str) -> Result<usize, DataError> {
    v.parse()
        .map_err(|_| DataError::Malformed(format!("bad integer: {v:?}")))
}

pub fn save_tags(path: &Path, tags: &MembershipTags, extra: &[(String, String)]) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TAGS_MAGIC}")?;
    for (k, v) in extra {
        writeln!(w, "# {k} = {v}")?;
    }
    writeln!(w, "sample_id,origin")?;
    for (id, origin) in &tags.0 {
        writeln!(w, "{},{}", id, origin.as_str())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tags(path: &Path) -> Result<MembershipTags, DataError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut tags = BTreeMap::new();
    let mut saw_header = false;
    for line in r.lines() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "sample_id,origin" {
                return Err(DataError::Malformed(format!("bad tags header {line:?}")));
            }
            saw_header = true;
            continue;
        }
        let Some((id, origin)) = line.split_once(',') else {
            return Err(DataError::Malformed(format!("bad tags row {line:?}")));
        };
        let id: u64 = id
            .parse()
            .map_err(|_| DataError::Malformed(format!("bad id {id:?}")))?;
        tags.insert(id, Origin::parse(origin)?);
    }
    Ok(MembershipTags(tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, classes: usize, separation: f64) -> MixtureSpec {
        MixtureSpec {
            d,
            classes,
            separation,
            image_shaped: false,
        }
    }

    #[test]
    fn zero_separation_collapses_all_class_means() {
        let s = spec(6, 3, 0.0);
        for m in s.class_means(1) {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn class_means_have_requested_norm_and_are_orthogonal() {
        let s = spec(16, 4, 5.0);
        let means = s.class_means(7);
        for m in &means {
            let n: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 5.0).abs() < 1e-9);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let dot: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9, "means {i},{j} not orthogonal: {dot}");
            }
        }
    }

    #[test]
    fn image_mode_means_are_flip_symmetric() {
        let s = MixtureSpec {
            d: 16,
            classes: 3,
            separation: 2.0,
            image_shaped: true,
        };
        for m in s.class_means(3) {
            let flipped = flip_features(&m, 4);
            for (a, b) in m.iter().zip(&flipped) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_generation_is_deterministic() {
        let s = spec(5, 2, 3.0);
        let a = gen_gaussian_mixture(&s, 10, 99);
        let b = gen_gaussian_mixture(&s, 10, 99);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.id, q.id);
            assert_eq!(p.y, q.y);
            assert_eq!(p.x, q.x);
        }
    }

    #[test]
    fn identity_shift_ood_matches_mixture_statistics() {
        // With no translation and unit covariance scaling, feature means of
        // OOD draws land near the overall mixture mean.
        let s = spec(4, 2, 4.0);
        let ood = gen_ood(&s, 4000, OodShift::identity(), 5);
        let ind = gen_gaussian_mixture(&s, 2000, 5);
        let mean = |rows: &[LabeledSample]| -> Vec<f64> {
            let mut m = vec![0.0; 4];
            for r in rows {
                for (a, b) in m.iter_mut().zip(&r.x) {
                    *a += b;
                }
            }
            for a in &mut m {
                *a /= rows.len() as f64;
            }
            m
        };
        let mo = mean(&ood);
        let mi = mean(&ind);
        for (a, b) in mo.iter().zip(&mi) {
            assert!((a - b).abs() < 0.25, "ood mean {a} vs in-dist {b}");
        }
        assert!(ood.iter().all(|s| s.origin == Origin::OodNonmember));
    }

    #[test]
    fn large_mean_shift_separates_ood_in_projection() {
        // Two-sample z test along the shift direction; z > 4.892 corresponds
        // to p < 1e-6 for a Gaussian null.
        let s = spec(6, 2, 2.0);
        let n = 400;
        let shift = OodShift {
            mean_shift: 10.0,
            cov_scale: 1.0,
        };
        let ood = gen_ood(&s, n, shift, 11);
        let ind = gen_gaussian_mixture(&s, n / 2, 11);
        let mut dir_rng = ChaCha8Rng::seed_from_u64(seed::derive(11, "ood-dir"));
        let mut dir: Vec<f64> = (0..6).map(|_| dir_rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut dir {
            *a /= norm;
        }
        let proj = |rows: &[LabeledSample]| -> Vec<f64> {
            rows.iter()
                .map(|r| r.x.iter().zip(&dir).map(|(a, b)| a * b).sum())
                .collect()
        };
        let po = proj(&ood);
        let pi = proj(&ind);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let z = (mean(&po) - mean(&pi)).abs()
            / (1.0 * (1.0 / po.len() as f64 + 1.0 / pi.len() as f64).sqrt());
        assert!(z > 4.892, "z statistic {z} too small for p < 1e-6");
    }

    #[test]
    fn zero_ood_draws_give_empty_list() {
        let s = spec(3, 2, 1.0);
        assert!(gen_ood(&s, 0, OodShift::identity(), 1).is_empty());
    }

    fn scenario_cfg(kind: ScenarioKind) -> ScenarioConfig {
        ScenarioConfig {
            kind,
            mixture: spec(6, 2, 6.0),
            n_members: 100,
            n_in_dist_nonmembers: 100,
            n_ood: 0,
            coverage_fraction: 1.0,
            ood_shift: OodShift {
                mean_shift: 6.0,
                cov_scale: 1.0,
            },
            seed: 31,
        }
    }

    #[test]
    fn standard_scenario_has_balanced_pool() {
        let sc = build_scenario(&scenario_cfg(ScenarioKind::Standard)).unwrap();
        assert_eq!(sc.pool.samples.len(), 200);
        let members = sc
            .tags
            .0
            .values()
            .filter(|&&o| o == Origin::Member)
            .count();
        assert_eq!(members, 100);
        assert_eq!(sc.train_set.len(), 100);
    }

    #[test]
    fn combined_scenario_mixes_all_sources() {
        let mut cfg = scenario_cfg(ScenarioKind::Combined);
        cfg.n_members = 100;
        cfg.n_in_dist_nonmembers = 60;
        cfg.n_ood = 140;
        let sc = build_scenario(&cfg).unwrap();
        assert_eq!(sc.pool.samples.len(), 300);
        let count = |o: Origin| sc.tags.0.values().filter(|&&t| t == o).count();
        assert_eq!(count(Origin::Member), 100);
        assert_eq!(count(Origin::InDistNonmember), 60);
        assert_eq!(count(Origin::OodNonmember), 140);
    }

    #[test]
    fn partial_coverage_keeps_exact_member_count_in_pool() {
        let mut cfg = scenario_cfg(ScenarioKind::PartialCoverage);
        cfg.n_in_dist_nonmembers = 50;
        cfg.coverage_fraction = 0.25;
        let sc = build_scenario(&cfg).unwrap();
        let members_in_pool = sc
            .tags
            .0
            .values()
            .filter(|&&o| o == Origin::Member)
            .count();
        assert_eq!(members_in_pool, 25);
        assert_eq!(sc.train_set.len(), 100);
        assert_eq!(sc.pool.samples.len(), 75);
    }

    #[test]
    fn pool_members_appear_verbatim_in_train_set() {
        let sc = build_scenario(&scenario_cfg(ScenarioKind::Standard)).unwrap();
        for entry in &sc.pool.samples {
            if sc.tags.is_member(entry.id) == Some(true) {
                let t = sc
                    .train_set
                    .iter()
                    .find(|s| s.id == entry.id)
                    .expect("member id present in train set");
                assert_eq!(t.x, entry.x);
                assert_eq!(t.y, entry.y);
            }
        }
    }

    #[test]
    fn scenario_build_is_deterministic() {
        let a = build_scenario(&scenario_cfg(ScenarioKind::Standard)).unwrap();
        let b = build_scenario(&scenario_cfg(ScenarioKind::Standard)).unwrap();
        let ids_a: Vec<u64> = a.pool.samples.iter().map(|s| s.id).collect();
        let ids_b: Vec<u64> = b.pool.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids_a, ids_b);
        assert_eq!(a.tags, b.tags);
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let mut cfg = scenario_cfg(ScenarioKind::Standard);
        cfg.n_in_dist_nonmembers = 50;
        assert!(matches!(build_scenario(&cfg), Err(DataError::Infeasible(_))));
        let mut cfg = scenario_cfg(ScenarioKind::Combined);
        cfg.n_ood = 0;
        assert!(matches!(build_scenario(&cfg), Err(DataError::Infeasible(_))));
    }

    #[test]
    fn dataset_and_tags_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let sc = build_scenario(&scenario_cfg(ScenarioKind::Standard)).unwrap();
        let pool_path = dir.path().join("pool.bin");
        let rows: Vec<(u64, usize, &[f64])> = sc
            .pool
            .samples
            .iter()
            .map(|s| (s.id, s.y, s.x.as_slice()))
            .collect();
        save_dataset(&pool_path, 6, 2, 31, false, &rows, &[]).unwrap();
        let loaded = load_dataset(&pool_path).unwrap();
        assert_eq!(loaded.rows.len(), sc.pool.samples.len());
        for (a, b) in loaded.rows.iter().zip(&sc.pool.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.y, b.y);
            let bits_a: Vec<u64> = a.x.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.x.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let tags_path = dir.path().join("pool.tags.csv");
        save_tags(&tags_path, &sc.tags, &[]).unwrap();
        assert_eq!(load_tags(&tags_path).unwrap(), sc.tags);
    }
}
