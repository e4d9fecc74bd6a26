//! Cross-domain evaluation: per-slice records, aggregated tables and error images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, normalize_slice, DatasetSpec, Slice, Split};
use crate::error::{Error, Result};
use crate::kspace::{undersample, MaskParams, RealImage};
use crate::metrics::{psnr, ssim};
use crate::model::CascadeModel;
use crate::train::{mask_for_sample, MaskPolicy};

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            s.serialize_str(&super::fmt_f64(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => super::parse_f64(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Shortest round-trip decimal form; infinities become `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s.parse().map_err(|_| format!("not a number: {s:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub train_domain: String,
    pub test_domain: String,
    pub slice_id: String,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
}

/// How evaluation masks are drawn for the test slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMasks {
    pub params: MaskParams,
    pub policy: MaskPolicy,
    pub seed: u64,
}

/// Reconstruction used for a record: the cascade, or the zero-filled baseline.
#[derive(Clone, Copy)]
pub enum Reconstructor<'a> {
    Model(&'a CascadeModel),
    ZeroFilled,
}

struct SliceResult {
    gt: RealImage,
    recon: RealImage,
}

fn run_slice(rec: Reconstructor, slice: &Slice, index: usize, masks: &EvalMasks) -> Result<SliceResult> {
    let shape = slice.image.shape();
    let mask = mask_for_sample(&masks.params, masks.policy, masks.seed, Split::Test, index, shape)?;
    let (gt, _) = normalize_slice(&slice.image)?;
    let (k, zf) = undersample(&gt, &mask)?;
    let out = match rec {
        Reconstructor::Model(m) => m.forward(&zf, &k, &mask)?,
        Reconstructor::ZeroFilled => zf,
    };
    Ok(SliceResult {
        gt: gt.magnitude_image(),
        recon: out.magnitude_image(),
    })
}

/// Scores every slice; the mask for slice `i` depends only on `(masks, i)`.
pub fn evaluate_slices(
    rec: Reconstructor,
    slices: &[Slice],
    masks: &EvalMasks,
    train_domain: &str,
    test_domain: &str,
) -> Result<Vec<EvalRecord>> {
    slices
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let r = run_slice(rec, s, i, masks)?;
            Ok(EvalRecord {
                train_domain: train_domain.to_string(),
                test_domain: test_domain.to_string(),
                slice_id: s.id.clone(),
                psnr: psnr(&r.gt, &r.recon)?,
                ssim: ssim(&r.gt, &r.recon)?,
            })
        })
        .collect()
}

/// Evaluates a model on the test split of `test_spec`.
pub fn evaluate_model(
    model: &CascadeModel,
    test_spec: &DatasetSpec,
    masks: &EvalMasks,
    train_domain: &str,
) -> Result<Vec<EvalRecord>> {
    let (slices, _) = load_dataset(&test_spec.with_split(Split::Test))?;
    evaluate_slices(
        Reconstructor::Model(model),
        &slices,
        masks,
        train_domain,
        &test_spec.id,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "inf_as_string")]
    pub mean: f64,
    #[serde(with = "inf_as_string")]
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation. An all-infinite sample has
    /// mean `inf` and std 0; a partly infinite one has mean and std `inf`.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let n_inf = values.iter().filter(|v| v.is_infinite()).count();
        if n_inf == values.len() && n_inf > 0 {
            return Stat {
                mean: f64::INFINITY,
                std: 0.0,
            };
        }
        if n_inf > 0 {
            return Stat {
                mean: f64::INFINITY,
                std: f64::INFINITY,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub train_domain: String,
    pub test_domain: String,
    pub count: usize,
    pub psnr: Stat,
    pub ssim: Stat,
    /// Train and test domain coincide.
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainTable {
    pub train_domains: Vec<String>,
    pub test_domains: Vec<String>,
    /// Row-major over `train_domains` x `test_domains`.
    pub cells: Vec<TableCell>,
}

fn first_seen<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in it {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

impl CrossDomainTable {
    /// Aggregates records; rows and columns keep first-appearance order.
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no evaluation records".into()));
        }
        let train_domains = first_seen(records.iter().map(|r| r.train_domain.as_str()));
        let test_domains = first_seen(records.iter().map(|r| r.test_domain.as_str()));
        let mut groups: BTreeMap<(&str, &str), Vec<&EvalRecord>> = BTreeMap::new();
        for r in records {
            groups
                .entry((r.train_domain.as_str(), r.test_domain.as_str()))
                .or_default()
                .push(r);
        }
        let mut cells = Vec::new();
        let mut missing = Vec::new();
        for tr in &train_domains {
            for te in &test_domains {
                match groups.get(&(tr.as_str(), te.as_str())) {
                    None => missing.push((tr.clone(), te.clone())),
                    Some(rs) => {
                        let p: Vec<f64> = rs.iter().map(|r| r.psnr).collect();
                        let s: Vec<f64> = rs.iter().map(|r| r.ssim).collect();
                        cells.push(TableCell {
                            train_domain: tr.clone(),
                            test_domain: te.clone(),
                            count: rs.len(),
                            psnr: Stat::of(&p),
                            ssim: Stat::of(&s),
                            matched: tr == te,
                        });
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
        Ok(Self {
            train_domains,
            test_domains,
            cells,
        })
    }

    pub fn cell(&self, train: &str, test: &str) -> Option<&TableCell> {
        self.cells
            .iter()
            .find(|c| c.train_domain == train && c.test_domain == test)
    }

    /// One row per train domain; four columns per test domain.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_domain");
        for te in &self.test_domains {
            for col in ["psnr_mean", "psnr_std", "ssim_mean", "ssim_std"] {
                out.push_str(&format!(",{te}_{col}"));
            }
        }
        out.push('\n');
        for tr in &self.train_domains {
            out.push_str(tr);
            for te in &self.test_domains {
                let c = self.cell(tr, te).expect("complete grid");
                for v in [c.psnr.mean, c.psnr.std, c.ssim.mean, c.ssim.std] {
                    out.push(',');
                    out.push_str(&fmt_f64(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("train_domain,test_domain,slice_id,psnr,ssim\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.train_domain,
            r.test_domain,
            r.slice_id,
            fmt_f64(r.psnr),
            fmt_f64(r.ssim)
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("train_domain,test_domain,slice_id,psnr,ssim") => {}
        _ => return Err(Error::InvalidInput("unexpected records.csv header".into())),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::InvalidInput(format!("bad record line {l:?}")));
            }
            Ok(EvalRecord {
                train_domain: f[0].into(),
                test_domain: f[1].into(),
                slice_id: f[2].into(),
                psnr: parse_f64(f[3]).map_err(Error::InvalidInput)?,
                ssim: parse_f64(f[4]).map_err(Error::InvalidInput)?,
            })
        })
        .collect()
}

fn quantise(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn save_gray(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches shape");
    img.save(path)
        .map_err(|e| Error::InvalidInput(format!("writing {}: {e}", path.display())))
}

/// Writes `<id>_gt.png`, `<id>_recon.png` and `<id>_error.png` per slice.
/// Magnitudes are divided by the ground-truth peak; the error image shows
/// `gain * | |recon| - |gt| |`. Everything is clipped to [0,1] before
/// 8-bit quantisation.
pub fn export_error_images(
    rec: Reconstructor,
    slices: &[Slice],
    masks: &EvalMasks,
    out_dir: &Path,
    error_gain: f64,
) -> Result<Vec<PathBuf>> {
    if !(error_gain.is_finite() && error_gain >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "error gain must be >= 0, got {error_gain}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    for (i, s) in slices.iter().enumerate() {
        let r = run_slice(rec, s, i, masks)?;
        let (h, w) = r.gt.shape();
        let peak = (r.gt.max() as f64).max(f64::MIN_POSITIVE);
        let gt = r.gt.data().iter().map(|&v| v / peak);
        let recon = r.recon.data().iter().map(|&v| v / peak);
        let err =
            r.gt.data()
                .iter()
                .zip(r.recon.data())
                .map(|(&a, &b)| error_gain * (a - b).abs() / peak);
        for (suffix, px) in [
            ("gt", quantise(gt)),
            ("recon", quantise(recon)),
            ("error", quantise(err)),
        ] {
            let path = out_dir.join(format!("{}_{suffix}.png", s.id));
            save_gray(&path, h, w, px)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomFamily;
    use crate::metrics::{gaussian_taps, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
    use crate::model::CascadeConfig;

    fn record(tr: &str, te: &str, id: &str, p: f64, s: f64) -> EvalRecord {
        EvalRecord {
            train_domain: tr.into(),
            test_domain: te.into(),
            slice_id: id.into(),
            psnr: p,
            ssim: s,
        }
    }

    fn spec() -> DatasetSpec {
        let mut d = DatasetSpec::phantom("E", PhantomFamily::Ellipses, 20, 4, [32, 32]);
        d.split_fractions = [0.6, 0.2, 0.2];
        d
    }

    fn masks() -> EvalMasks {
        EvalMasks {
            params: MaskParams::default(),
            policy: MaskPolicy::PerSample,
            seed: 9,
        }
    }

    /// Direct per-window SSIM with an explicit 2D Gaussian window.
    fn ssim_naive(x: &RealImage, y: &RealImage) -> f64 {
        let (h, w) = x.shape();
        let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let l = x.max();
        let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..=h - SSIM_WINDOW {
            for c in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = t[i] * t[j];
                        let a = x.get(r + i, c + j);
                        let b = y.get(r + i, c + j);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total +=
                    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn filtered_ssim_matches_naive_windows() {
        let d = DatasetSpec::phantom("E", PhantomFamily::Mixed, 2, 11, [64, 64]);
        let a = crate::data::phantom_slice(&d, 0).unwrap().image.magnitude_image();
        let b = crate::data::phantom_slice(&d, 1).unwrap().image.magnitude_image();
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_naive(&a, &b);
        assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn full_mask_gives_infinite_psnr() {
        let model = CascadeModel::init(
            CascadeConfig {
                n_cascades: 1,
                n_conv_per_block: 2,
                n_filters: 4,
                ..CascadeConfig::default()
            },
            0,
        )
        .unwrap();
        let m = EvalMasks {
            params: MaskParams {
                acceleration: 1.0,
                ..MaskParams::default()
            },
            ..masks()
        };
        let recs = evaluate_model(&model, &spec(), &m, "E").unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert_eq!(r.psnr, f64::INFINITY);
        }
        let table = CrossDomainTable::from_records(&recs).unwrap();
        assert!(table.to_csv().contains(",inf,0,"));
    }

    #[test]
    fn zero_init_model_equals_zero_filled() {
        let model = CascadeModel::init(
            CascadeConfig {
                n_cascades: 2,
                n_conv_per_block: 2,
                n_filters: 4,
                ..CascadeConfig::default()
            },
            3,
        )
        .unwrap();
        let (slices, _) = load_dataset(&spec().with_split(Split::Test)).unwrap();
        let a = evaluate_slices(Reconstructor::Model(&model), &slices, &masks(), "E", "E").unwrap();
        let b = evaluate_slices(Reconstructor::ZeroFilled, &slices, &masks(), "E", "E").unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.psnr - y.psnr).abs() < 1e-4);
            assert!((x.ssim - y.ssim).abs() < 1e-6);
        }
    }

    #[test]
    fn single_record_cells_have_zero_std() {
        let recs = vec![
            record("A", "X", "1", 30.0, 0.9),
            record("A", "Y", "2", 25.0, 0.8),
            record("B", "X", "3", 28.0, 0.85),
            record("B", "Y", "4", 27.0, 0.7),
        ];
        let t = CrossDomainTable::from_records(&recs).unwrap();
        let c = t.cell("B", "Y").unwrap();
        assert_eq!((c.psnr.mean, c.psnr.std, c.count), (27.0, 0.0, 1));
        assert!(!c.matched);
    }

    #[test]
    fn missing_cells_are_listed() {
        let recs = vec![record("A", "X", "1", 30.0, 0.9), record("B", "Y", "2", 25.0, 0.8)];
        match CrossDomainTable::from_records(&recs).unwrap_err() {
            Error::MissingCells(m) => {
                assert_eq!(m, vec![("A".into(), "Y".into()), ("B".into(), "X".into())]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn population_std_and_csv_round_trip() {
        let recs = vec![
            record("A", "X", "1", 30.0, 0.9),
            record("A", "X", "2", 32.0, 0.7),
            record("A", "X", "3", f64::INFINITY, 1.0),
            record("A", "Y", "4", 20.0, 0.5),
            record("A", "Y", "5", 24.0, 0.25),
        ];
        let t = CrossDomainTable::from_records(&recs).unwrap();
        let y = t.cell("A", "Y").unwrap();
        assert_eq!((y.psnr.mean, y.psnr.std), (22.0, 2.0));
        assert_eq!(t.cell("A", "X").unwrap().psnr.mean, f64::INFINITY);

        let back = records_from_csv(&records_to_csv(&recs)).unwrap();
        assert_eq!(back, recs);
        let again = CrossDomainTable::from_records(&back).unwrap();
        assert_eq!(again.to_csv(), t.to_csv());

        let row = t.to_csv().lines().nth(1).unwrap().to_string();
        let fields: Vec<f64> = row.split(',').skip(1).map(|f| parse_f64(f).unwrap()).collect();
        assert_eq!(fields[4], 22.0);
        assert_eq!(fields[5], 2.0);
        assert!((fields[6] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn json_uses_inf_strings() {
        let t = CrossDomainTable::from_records(&[record("A", "A", "1", f64::INFINITY, 1.0)]).unwrap();
        let j = t.to_json().unwrap();
        assert!(j.contains("\"inf\""));
        let back: CrossDomainTable = serde_json::from_str(&j).unwrap();
        assert_eq!(back, t);
        assert!(back.cells[0].matched);
    }

    #[test]
    fn error_images_count_and_gain() {
        let dir = tempfile::tempdir().unwrap();
        let (slices, _) = load_dataset(&spec().with_split(Split::Test)).unwrap();
        let files = export_error_images(
            Reconstructor::ZeroFilled,
            &slices,
            &masks(),
            &dir.path().join("g1"),
            1.0,
        )
        .unwrap();
        assert_eq!(files.len(), 3 * slices.len());
        let files5 = export_error_images(
            Reconstructor::ZeroFilled,
            &slices,
            &masks(),
            &dir.path().join("g5"),
            5.0,
        )
        .unwrap();
        let e1 = image::open(&files[2]).unwrap().into_luma8();
        let e5 = image::open(&files5[2]).unwrap().into_luma8();
        assert!(e1.pixels().zip(e5.pixels()).all(|(a, b)| b[0] >= a[0]));
        assert!(e5.pixels().any(|p| p[0] > 0));

        let full = EvalMasks {
            params: MaskParams {
                acceleration: 1.0,
                ..MaskParams::default()
            },
            ..masks()
        };
        let perfect = export_error_images(
            Reconstructor::ZeroFilled,
            &slices[..1],
            &full,
            &dir.path().join("p"),
            5.0,
        )
        .unwrap();
        let e = image::open(&perfect[2]).unwrap().into_luma8();
        assert!(e.pixels().all(|p| p[0] == 0));
    }
}
