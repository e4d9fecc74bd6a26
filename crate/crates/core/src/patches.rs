//! Patch extraction, exact nearest-neighbour distances and significance tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::eval::inf_as_string;
use crate::kspace::container::{self, f32_to_le, le_to_f32};
use crate::kspace::ComplexImage;

pub const DEFAULT_BLOCK: usize = 1024;
const TARGET_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchNorm {
    #[default]
    None,
    ZeroMean,
}

impl std::str::FromStr for PatchNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PatchNorm::None),
            "zero-mean" => Ok(PatchNorm::ZeroMean),
            _ => Err(Error::Config(format!(
                "unknown patch norm '{s}' (none, zero-mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub n: usize,
    /// Row-major `n x patch_size^2`.
    pub vectors: Vec<f32>,
    pub domain_id: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct PatchHeader {
    dtype: String,
    patch_size: usize,
    n: usize,
    domain_id: String,
    seed: u64,
}

impl PatchSet {
    pub fn new(patch_size: usize, vectors: Vec<f32>, domain_id: &str, seed: u64) -> Result<Self> {
        let d = patch_size * patch_size;
        if d == 0 || !vectors.len().is_multiple_of(d) {
            return Err(Error::InvalidInput(format!(
                "{} values do not split into {patch_size}x{patch_size} patches",
                vectors.len()
            )));
        }
        Ok(Self {
            patch_size,
            n: vectors.len() / d,
            vectors,
            domain_id: domain_id.to_string(),
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors[i * d..(i + 1) * d]
    }

    /// Patches `0..n` of this set.
    pub fn head(&self, n: usize) -> PatchSet {
        let n = n.min(self.n);
        PatchSet {
            n,
            vectors: self.vectors[..n * self.dim()].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PatchHeader {
            dtype: "f32".into(),
            patch_size: self.patch_size,
            n: self.n,
            domain_id: self.domain_id.clone(),
            seed: self.seed,
        };
        container::encode(&header, &[&f32_to_le(&self.vectors)])
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (h, payload): (PatchHeader, _) = container::decode(bytes, path)?;
        let expected = 4 * h.n * h.patch_size * h.patch_size;
        if h.dtype != "f32" || payload.len() != expected {
            return Err(Error::Container {
                path: path.to_path_buf(),
                reason: format!("expected {expected} bytes of f32 patches"),
            });
        }
        PatchSet::new(h.patch_size, le_to_f32(&payload), &h.domain_id, h.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_bytes(path)?, path)
    }
}

/// Draws `n` patches at uniformly random `(image, row, col)` positions from
/// the max-normalised magnitude of each image.
pub fn extract_patches(
    images: &[ComplexImage],
    n: usize,
    patch_size: usize,
    seed: u64,
    domain_id: &str,
    norm: PatchNorm,
) -> Result<PatchSet> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to extract patches from".into()));
    }
    if patch_size == 0 {
        return Err(Error::Config("patch size must be >= 1".into()));
    }
    for img in images {
        let (h, w) = img.shape();
        if h < patch_size || w < patch_size {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is smaller than a {patch_size}x{patch_size} patch"
            )));
        }
    }
    let mags: Vec<(usize, Vec<f64>)> = images
        .iter()
        .map(|img| {
            let m = img.magnitude_image();
            let peak = m.max();
            let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
            (img.width(), m.data().iter().map(|v| v * scale).collect())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = patch_size * patch_size;
    let mut vectors = Vec::with_capacity(n * d);
    for _ in 0..n {
        let k = rng.random_range(0..images.len());
        let (h, w) = images[k].shape();
        let r0 = rng.random_range(0..=h - patch_size);
        let c0 = rng.random_range(0..=w - patch_size);
        let (width, data) = &mags[k];
        let start = vectors.len();
        for r in r0..r0 + patch_size {
            vectors.extend(
                data[r * width + c0..r * width + c0 + patch_size]
                    .iter()
                    .map(|&v| v as f32),
            );
        }
        if norm == PatchNorm::ZeroMean {
            let p = &mut vectors[start..];
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            p.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
        }
    }
    PatchSet::new(patch_size, vectors, domain_id, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnDistanceResult {
    pub target_domain: String,
    pub source_domain: String,
    pub distances: Vec<f64>,
    /// Index of the nearest source patch (lowest index on ties).
    pub indices: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

fn exact_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exact Euclidean nearest neighbours of every target patch in `source`.
///
/// Candidates are screened with the blocked expansion
/// `|a|^2 + |b|^2 - 2 a.b` (f64 GEMM, clamped at zero). Any source whose
/// screened distance is within a rounding margin of the best exact distance
/// found so far is re-measured directly, so the result is exact and does not
/// depend on `block_size`.
pub fn nn_distances_blocked(
    target: &PatchSet,
    source: &PatchSet,
    block_size: usize,
) -> Result<NnDistanceResult> {
    if target.patch_size != source.patch_size {
        return Err(Error::InvalidInput(format!(
            "patch dimension mismatch: {} vs {}",
            target.dim(),
            source.dim()
        )));
    }
    if source.n == 0 {
        return Err(Error::InvalidInput("source patch set is empty".into()));
    }
    if target.n == 0 {
        return Err(Error::InvalidInput("target patch set is empty".into()));
    }
    let block = block_size.max(1);
    let d = target.dim();
    let to64 = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let src = to64(&source.vectors);
    let src_sq: Vec<f64> = src
        .chunks_exact(d)
        .map(|p| p.iter().map(|x| x * x).sum())
        .collect();
    let max_src_sq = src_sq.iter().copied().fold(0.0, f64::max);

    let tiles: Vec<(Vec<f64>, Vec<usize>)> = (0..target.n)
        .step_by(TARGET_TILE)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|t0| {
            let t1 = (t0 + TARGET_TILE).min(target.n);
            let bt = t1 - t0;
            let tgt = to64(&target.vectors[t0 * d..t1 * d]);
            let tgt_sq: Vec<f64> = tgt
                .chunks_exact(d)
                .map(|p| p.iter().map(|x| x * x).sum())
                .collect();
            let margin: Vec<f64> = tgt_sq.iter().map(|a| 1e-9 * (1.0 + a + max_src_sq)).collect();
            let mut best = vec![f64::INFINITY; bt];
            let mut arg = vec![0usize; bt];
            let mut dots = vec![0.0f64; bt * block];
            for s0 in (0..source.n).step_by(block) {
                let s1 = (s0 + block).min(source.n);
                let bs = s1 - s0;
                // dots[i][j] = tgt_i . src_{s0+j}
                unsafe {
                    matrixmultiply::dgemm(
                        bt,
                        d,
                        bs,
                        1.0,
                        tgt.as_ptr(),
                        d as isize,
                        1,
                        src[s0 * d..].as_ptr(),
                        1,
                        d as isize,
                        0.0,
                        dots.as_mut_ptr(),
                        bs as isize,
                        1,
                    );
                }
                for i in 0..bt {
                    let row = &dots[i * bs..(i + 1) * bs];
                    let a2 = tgt_sq[i];
                    for (j, &dot) in row.iter().enumerate() {
                        let approx = (a2 + src_sq[s0 + j] - 2.0 * dot).max(0.0);
                        if approx <= best[i] + margin[i] {
                            let sj = s0 + j;
                            let exact = exact_sq(target.patch(t0 + i), source.patch(sj));
                            if exact < best[i] {
                                best[i] = exact;
                                arg[i] = sj;
                            }
                        }
                    }
                }
            }
            (best.into_iter().map(f64::sqrt).collect(), arg)
        })
        .collect();

    let mut distances = Vec::with_capacity(target.n);
    let mut indices = Vec::with_capacity(target.n);
    for (dist, idx) in tiles {
        distances.extend(dist);
        indices.extend(idx);
    }
    let (mean, std) = mean_std(&distances);
    Ok(NnDistanceResult {
        target_domain: target.domain_id.clone(),
        source_domain: source.domain_id.clone(),
        distances,
        indices,
        mean,
        std,
    })
}

pub fn nn_distances(target: &PatchSet, source: &PatchSet) -> Result<NnDistanceResult> {
    nn_distances_blocked(target, source, DEFAULT_BLOCK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignificanceTest {
    /// Paired test on per-target differences.
    #[default]
    Wilcoxon,
    /// Unpaired rank-sum test on the two distance samples.
    MannWhitney,
}

impl std::str::FromStr for SignificanceTest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wilcoxon" => Ok(SignificanceTest::Wilcoxon),
            "mann-whitney" => Ok(SignificanceTest::MannWhitney),
            _ => Err(Error::Config(format!(
                "unknown test '{s}' (wilcoxon, mann-whitney)"
            ))),
        }
    }
}

/// Average ranks (1-based) of `values` and the tie sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn two_sided_normal(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided Wilcoxon signed-rank test on paired differences. Zero
/// differences are dropped; if nothing remains, `p = 1`. Uses the exact null
/// distribution for up to 50 untied differences, otherwise the normal
/// approximation with tie-corrected variance.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> TestOutcome {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return TestOutcome {
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let nf = n as f64;
    if n <= 50 && ties.is_empty() {
        // counts[s] = number of sign assignments with W+ = s
        let max = n * (n + 1) / 2;
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for k in 1..=n {
            for s in (k..=max).rev() {
                counts[s] += counts[s - k];
            }
        }
        let total = 2f64.powi(n as i32);
        let w = w_plus.round() as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        return TestOutcome {
            statistic: w_plus,
            p_value: (2.0 * lower.min(upper)).min(1.0),
        };
    }
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = if var > 0.0 {
        (w_plus - mean) / var.sqrt()
    } else {
        0.0
    };
    TestOutcome {
        statistic: w_plus,
        p_value: two_sided_normal(z),
    }
}

/// Two-sided Mann-Whitney U test, normal approximation with tie correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> TestOutcome {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&pooled);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let z = if var > 0.0 {
        (u - n1 * n2 / 2.0) / var.sqrt()
    } else {
        0.0
    };
    TestOutcome {
        statistic: u,
        p_value: two_sided_normal(z),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceComparison {
    pub target_domain: String,
    pub source_a: String,
    pub source_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: SignificanceTest,
    pub statistic: f64,
    #[serde(with = "inf_as_string")]
    pub p_value: f64,
}

pub const MIN_COMPARISON_TARGETS: usize = 10;

pub fn compare_distances(
    a: &NnDistanceResult,
    b: &NnDistanceResult,
    test: SignificanceTest,
) -> Result<SourceComparison> {
    if a.distances.len() != b.distances.len() {
        return Err(Error::InvalidInput(
            "distance vectors index different targets".into(),
        ));
    }
    if a.distances.len() < MIN_COMPARISON_TARGETS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_COMPARISON_TARGETS} target patches for a significance test, got {}",
            a.distances.len()
        )));
    }
    let outcome = match test {
        SignificanceTest::Wilcoxon => {
            let diffs: Vec<f64> = a.distances.iter().zip(&b.distances).map(|(x, y)| x - y).collect();
            wilcoxon_signed_rank(&diffs)
        }
        SignificanceTest::MannWhitney => mann_whitney_u(&a.distances, &b.distances),
    };
    Ok(SourceComparison {
        target_domain: a.target_domain.clone(),
        source_a: a.source_domain.clone(),
        source_b: b.source_domain.clone(),
        mean_a: a.mean,
        mean_b: b.mean,
        test,
        statistic: outcome.statistic,
        p_value: outcome.p_value,
    })
}

/// NN distances of `target` to both sources and a two-sided test of their difference.
pub fn compare_sources(
    target: &PatchSet,
    source_a: &PatchSet,
    source_b: &PatchSet,
    test: SignificanceTest,
) -> Result<SourceComparison> {
    if target.n < MIN_COMPARISON_TARGETS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_COMPARISON_TARGETS} target patches for a significance test, got {}",
            target.n
        )));
    }
    compare_distances(
        &nn_distances(target, source_a)?,
        &nn_distances(target, source_b)?,
        test,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCell {
    pub target: String,
    pub source: String,
    pub mean: f64,
    pub std: f64,
    pub row_min: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    /// Cells present in the table; pairs with matching ids are omitted.
    pub cells: Vec<DistanceCell>,
}

impl DistanceTable {
    pub fn cell(&self, target: &str, source: &str) -> Option<&DistanceCell> {
        self.cells
            .iter()
            .find(|c| c.target == target && c.source == source)
    }

    /// Wide layout: `<source>_mean,<source>_std` per source, `-` on the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for s in &self.sources {
            out.push_str(&format!(",{s}_mean,{s}_std"));
        }
        out.push_str(",row_min\n");
        for t in &self.targets {
            out.push_str(t);
            let mut min_src = "";
            for s in &self.sources {
                match self.cell(t, s) {
                    Some(c) => {
                        out.push_str(&format!(",{},{}", c.mean, c.std));
                        if c.row_min {
                            min_src = &c.source;
                        }
                    }
                    None => out.push_str(",-,-"),
                }
            }
            out.push_str(&format!(",{min_src}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and std of NN distances for every (target, source) pair, with the
/// per-row minimum flagged (first source wins exact ties). Also returns the
/// full per-pair results for downstream tests.
pub fn distance_table(
    targets: &[PatchSet],
    sources: &[PatchSet],
    block_size: usize,
) -> Result<(DistanceTable, Vec<NnDistanceResult>)> {
    if targets.is_empty() || sources.len() < 2 {
        return Err(Error::InvalidInput(
            "a distance table needs at least one target and two sources".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut results = Vec::new();
    for t in targets {
        let row_start = cells.len();
        for s in sources {
            if s.domain_id == t.domain_id {
                continue;
            }
            let r = nn_distances_blocked(t, s, block_size)?;
            cells.push(DistanceCell {
                target: t.domain_id.clone(),
                source: s.domain_id.clone(),
                mean: r.mean,
                std: r.std,
                row_min: false,
            });
            results.push(r);
        }
        let row = &mut cells[row_start..];
        if let Some(k) = (0..row.len()).min_by(|&a, &b| row[a].mean.total_cmp(&row[b].mean)) {
            row[k].row_min = true;
        }
    }
    Ok((
        DistanceTable {
            targets: targets.iter().map(|t| t.domain_id.clone()).collect(),
            sources: sources.iter().map(|s| s.domain_id.clone()).collect(),
            cells,
        },
        results,
    ))
}
