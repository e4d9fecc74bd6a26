use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::Args;
use log::info;
use serde::Serialize;
use xdr_core::data::{load_dataset, load_natural_dir, Slice, Split};
use xdr_core::eval::{
    evaluate_slices, export_error_images, records_from_csv, records_to_csv, CrossDomainTable, EvalMasks,
    EvalRecord, Reconstructor,
};
use xdr_core::kspace::container::{read_complex, read_mask, write_complex, write_mask};
use xdr_core::model::checkpoint::CascadeCheckpoint;
use xdr_core::patches::{
    compare_distances, distance_table, extract_patches, PatchSet, SignificanceTest, SourceComparison,
};
use xdr_core::phase::{derive_seed, PhaseParams};
use xdr_core::train::{reconstruct, train_with_log, TrainConfig};
use xdr_core::{generate_mask, MaskMode, MaskParams};

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::{Overrides, ValidationError};

pub const BASELINE: &str = "zero-filled";

pub struct Context {
    pub config: RunConfig,
    output_flag: Option<PathBuf>,
}

impl Context {
    pub fn new(config: Option<&Path>, output_flag: Option<PathBuf>) -> anyhow::Result<Self> {
        let config = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(Self { config, output_flag })
    }

    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        let c = &mut self.config;
        if let Some(v) = o.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = o.seed {
            c.global_seed = v;
        }
        if let Some(v) = o.accel {
            c.mask.acceleration = v;
        }
        c.validate()
    }

    fn output_root(&self) -> PathBuf {
        self.output_flag
            .clone()
            .or_else(|| self.config.output_dir.clone())
            .or_else(|| std::env::var_os("XDR_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("xdr-output"))
    }

    fn outputs(&self, command: &str) -> anyhow::Result<Outputs> {
        Outputs::create(self.output_root().join(command))
    }

    /// Hash of the configuration with the output location removed, so the
    /// same experiment written to two places hashes the same.
    fn hash(&self) -> String {
        let mut c = self.config.clone();
        c.output_dir = None;
        c.hash()
    }

    fn masks(&self) -> EvalMasks {
        EvalMasks {
            params: self.config.mask,
            policy: self.config.eval.mask_policy,
            seed: self.config.global_seed,
        }
    }

    fn train_config(&self, dataset: &str, checkpoint_dir: PathBuf) -> anyhow::Result<TrainConfig> {
        let c = &self.config;
        Ok(TrainConfig {
            dataset: c.dataset(dataset)?.clone(),
            mask: c.mask,
            cascade: c.cascade,
            epochs: c.train.epochs,
            batch_size: c.train.batch_size,
            learning_rate: c.train.learning_rate,
            optimizer: c.train.optimizer,
            seed: c.global_seed,
            checkpoint_dir: Some(checkpoint_dir),
            mask_policy: c.train.mask_policy,
        })
    }

    fn test_slices(&self, dataset: &str) -> anyhow::Result<Vec<Slice>> {
        let spec = self.config.dataset(dataset)?.with_split(Split::Test);
        Ok(load_dataset(&spec)
            .with_context(|| format!("loading test split of '{dataset}'"))?
            .0)
    }
}

#[derive(Args)]
pub struct MaskArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 4.0)]
    accel: f64,
    #[arg(long, default_value_t = 0.08)]
    center_frac: f64,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    /// lines-1d or points-2d.
    #[arg(long, default_value = "lines-1d")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn mask(a: MaskArgs) -> anyhow::Result<()> {
    let mode: MaskMode = a.mode.parse()?;
    let params = MaskParams {
        acceleration: a.accel,
        center_fraction: a.center_frac,
        sigma: a.sigma,
        mode,
        seed: a.seed,
    };
    let m = generate_mask(a.height, a.width, &params)?;
    write_mask(&a.out, &m)?;
    println!(
        "{}: {} of {} samples ({} columns)",
        a.out.display(),
        m.count(),
        a.height * a.width,
        m.sampled_columns().len()
    );
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory of PNG/JPEG/BMP images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 16.0)]
    phase_sigma: f64,
    #[arg(long, default_value_t = std::f64::consts::PI)]
    phase_range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let phase = PhaseParams {
        smoothness_sigma: a.phase_sigma,
        phase_range: a.phase_range,
        seed: a.seed,
    };
    phase.validate()?;
    let (slices, report) = load_natural_dir(&a.input, [a.height, a.width], &phase)?;
    if slices.is_empty() {
        bail!("no decodable images in {}", a.input.display());
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in &slices {
        let stem = Path::new(&s.id)
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| s.id.clone());
        write_complex(&a.out.join(format!("{stem}.cimg")), &s.image)?;
    }
    std::fs::write(
        a.out.join("load_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "{} of {} images converted, {} skipped",
        report.decoded,
        report.scanned,
        report.skipped.len()
    );
    Ok(())
}

fn record_training(out: &mut Outputs, dir: &Path) {
    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl"] {
        out.record(dir.join(f));
    }
}

pub fn train(mut ctx: Context, dataset: &str, o: &Overrides) -> anyhow::Result<()> {
    ctx.apply(o)?;
    let mut out = ctx.outputs("train")?;
    let dir = out.root().join(dataset);
    let cfg = ctx.train_config(dataset, dir.clone())?;
    let outcome = train_with_log(&cfg)?;
    record_training(&mut out, &dir);
    out.finish("train", &ctx.hash())?;
    let last = outcome.log.iter().rev().find(|r| r.split == "train");
    if let Some(r) = last {
        println!(
            "trained '{dataset}': final train loss {:.6}, psnr {:.3} dB",
            r.loss, r.psnr
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct ReconArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fully sampled complex slice (CIMG1).
    #[arg(long)]
    input: PathBuf,
    /// Sampling mask (CIMG1).
    #[arg(long)]
    mask: PathBuf,
}

pub fn recon(ctx: Context, a: ReconArgs) -> anyhow::Result<()> {
    let ckpt = CascadeCheckpoint::load(&a.checkpoint)?;
    let slice = read_complex(&a.input)?;
    let mask = read_mask(&a.mask)?;
    let result = reconstruct(&ckpt, &slice, &mask)?;
    let mut out = ctx.outputs("recon")?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slice".into());
    let path = out.path(&format!("{stem}.cimg"))?;
    write_complex(&path, &result)?;
    out.record(path.clone());
    out.finish("recon", &ctx.hash())?;
    println!("{}", path.display());
    Ok(())
}

fn write_tables(out: &mut Outputs, prefix: &str, records: &[EvalRecord]) -> anyhow::Result<CrossDomainTable> {
    let table = CrossDomainTable::from_records(records)?;
    out.write(
        &format!("{prefix}records.csv"),
        records_to_csv(records).as_bytes(),
    )?;
    out.write(&format!("{prefix}table.csv"), table.to_csv().as_bytes())?;
    out.write(
        &format!("{prefix}table.json"),
        (table.to_json()? + "\n").as_bytes(),
    )?;
    Ok(table)
}

pub fn eval(
    mut ctx: Context,
    checkpoint: &Path,
    dataset: &str,
    train_domain: Option<String>,
    o: &Overrides,
) -> anyhow::Result<()> {
    ctx.apply(o)?;
    let ckpt = CascadeCheckpoint::load(checkpoint)?;
    let label = train_domain.unwrap_or_else(|| ckpt.training_meta.dataset_id.clone());
    let model = ckpt.model()?;
    let slices = ctx.test_slices(dataset)?;
    let records = evaluate_slices(
        Reconstructor::Model(&model),
        &slices,
        &ctx.masks(),
        &label,
        dataset,
    )?;
    let mut out = ctx.outputs("eval")?;
    let table = write_tables(&mut out, "", &records)?;
    out.finish("eval", &ctx.hash())?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn xdomain(mut ctx: Context, o: &Overrides) -> anyhow::Result<()> {
    ctx.apply(o)?;
    let train_domains = ctx.config.train_domains();
    let test_domains = ctx.config.test_domains();
    if train_domains.is_empty() || test_domains.is_empty() {
        bail!(ValidationError("xdomain needs at least one dataset".into()));
    }
    let mut out = ctx.outputs("xdomain")?;
    let masks = ctx.masks();
    let tests: Vec<(String, Vec<Slice>)> = test_domains
        .iter()
        .map(|d| Ok((d.clone(), ctx.test_slices(d)?)))
        .collect::<anyhow::Result<_>>()?;

    let mut baseline = Vec::new();
    for (d, slices) in &tests {
        baseline.extend(evaluate_slices(
            Reconstructor::ZeroFilled,
            slices,
            &masks,
            BASELINE,
            d,
        )?);
    }
    let mut records = Vec::new();
    for tr in &train_domains {
        info!("training on '{tr}'");
        let dir = out.root().join("train").join(tr);
        let outcome = train_with_log(&ctx.train_config(tr, dir.clone())?)?;
        record_training(&mut out, &dir);
        let model = outcome.best_checkpoint.model()?;
        for (te, slices) in &tests {
            records.extend(evaluate_slices(
                Reconstructor::Model(&model),
                slices,
                &masks,
                tr,
                te,
            )?);
        }
    }
    let table = write_tables(&mut out, "", &records)?;
    write_tables(&mut out, "baseline_", &baseline)?;
    out.finish("xdomain", &ctx.hash())?;
    print!("{}", table.to_csv());
    Ok(())
}

#[derive(Serialize)]
struct PatchdistOutput<'a> {
    comparisons: &'a [SourceComparison],
}

fn comparisons_csv(rows: &[SourceComparison]) -> String {
    let mut s = String::from("target,source_a,source_b,mean_a,mean_b,test,statistic,p_value\n");
    for c in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.target_domain,
            c.source_a,
            c.source_b,
            c.mean_a,
            c.mean_b,
            match c.test {
                SignificanceTest::Wilcoxon => "wilcoxon",
                SignificanceTest::MannWhitney => "mann-whitney",
            },
            c.statistic,
            xdr_core::eval::fmt_f64(c.p_value)
        ));
    }
    s
}

pub fn patchdist(
    mut ctx: Context,
    seed: Option<u64>,
    block_size: Option<usize>,
    patch_norm: Option<String>,
    test: Option<String>,
) -> anyhow::Result<()> {
    if let Some(s) = seed {
        ctx.config.global_seed = s;
    }
    if let Some(b) = block_size {
        ctx.config.patch_stats.block_size = b;
    }
    if let Some(n) = patch_norm {
        ctx.config.patch_stats.patch_norm = n.parse()?;
    }
    if let Some(t) = test {
        ctx.config.patch_stats.test = t.parse()?;
    }
    ctx.config.validate()?;
    let ps = ctx.config.patch_stats.clone();
    if ps.targets.is_empty() || ps.sources.len() < 2 {
        bail!(ValidationError(
            "patch_stats needs at least one target and two sources".into()
        ));
    }
    let mut out = ctx.outputs("patchdist")?;
    // Seeds depend on the role only, so identical datasets give identical patches.
    let extract = |src: &crate::config::PatchSource, role: &str| -> anyhow::Result<PatchSet> {
        let spec = ctx.config.dataset(&src.dataset)?.with_split(ps.split);
        let (slices, _) = load_dataset(&spec)?;
        let images: Vec<_> = slices.into_iter().map(|s| s.image).collect();
        let seed = derive_seed(ctx.config.global_seed, &format!("patches/{role}"));
        Ok(extract_patches(
            &images,
            src.n,
            ps.patch_size,
            seed,
            &src.dataset,
            ps.patch_norm,
        )?)
    };
    let mut targets = Vec::new();
    for t in &ps.targets {
        let set = extract(t, "target")?;
        out.write(&format!("patches/target_{}.cimg", t.dataset), &set.to_bytes()?)?;
        targets.push(set);
    }
    let mut sources = Vec::new();
    for s in &ps.sources {
        let set = extract(s, "source")?;
        out.write(&format!("patches/source_{}.cimg", s.dataset), &set.to_bytes()?)?;
        sources.push(set);
    }
    let (table, results) = distance_table(&targets, &sources, ps.block_size)?;

    // Row minimum against every other source of the same row.
    let mut comparisons = Vec::new();
    for t in &table.targets {
        let Some(best) = table.cells.iter().find(|c| &c.target == t && c.row_min) else {
            continue;
        };
        let find = |s: &str| {
            results
                .iter()
                .find(|r| &r.target_domain == t && r.source_domain == s)
        };
        let a = find(&best.source).expect("row result");
        for c in table.cells.iter().filter(|c| &c.target == t && !c.row_min) {
            let b = find(&c.source).expect("row result");
            comparisons.push(compare_distances(a, b, ps.test)?);
        }
    }
    out.write("table.csv", table.to_csv().as_bytes())?;
    out.write("table.json", (table.to_json()? + "\n").as_bytes())?;
    out.write("comparisons.csv", comparisons_csv(&comparisons).as_bytes())?;
    out.write(
        "comparisons.json",
        (serde_json::to_string_pretty(&PatchdistOutput {
            comparisons: &comparisons,
        })? + "\n")
            .as_bytes(),
    )?;
    out.finish("patchdist", &ctx.hash())?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn report(ctx: Context) -> anyhow::Result<()> {
    let root = ctx.output_root();
    let xdomain = root.join("xdomain");
    let patchdist = root.join("patchdist");
    let tables: Vec<(PathBuf, &str)> = [
        (xdomain.join("table.csv"), "xdomain_table.csv"),
        (xdomain.join("records.csv"), "xdomain_records.csv"),
        (xdomain.join("baseline_table.csv"), "baseline_table.csv"),
        (patchdist.join("table.csv"), "patchdist_table.csv"),
        (patchdist.join("comparisons.csv"), "patchdist_comparisons.csv"),
    ]
    .into_iter()
    .filter(|(p, _)| p.is_file())
    .collect();
    if tables.is_empty() {
        bail!("nothing to report in {}", root.display());
    }
    let mut out = ctx.outputs("report")?;
    for (src, name) in &tables {
        let bytes = std::fs::read(src).with_context(|| format!("reading {}", src.display()))?;
        out.write(name, &bytes)?;
    }

    let records_path = xdomain.join("records.csv");
    if records_path.is_file() {
        let records = records_from_csv(&std::fs::read_to_string(&records_path)?)?;
        let table = CrossDomainTable::from_records(&records)?;
        let masks = ctx.masks();
        let n = ctx.config.eval.report_slices;
        for te in &table.test_domains {
            let slices = ctx.test_slices(te)?;
            let slices = &slices[..n.min(slices.len())];
            for tr in &table.train_domains {
                let ckpt_path = xdomain.join("train").join(tr).join("best.ckpt");
                let ckpt = CascadeCheckpoint::load(&ckpt_path)?;
                let model = ckpt.model()?;
                let dir = out.root().join("images").join(format!("{tr}_on_{te}"));
                for f in export_error_images(
                    Reconstructor::Model(&model),
                    slices,
                    &masks,
                    &dir,
                    ctx.config.eval.error_gain,
                )? {
                    out.record(f);
                }
            }
            let dir = out.root().join("images").join(format!("{BASELINE}_on_{te}"));
            for f in export_error_images(
                Reconstructor::ZeroFilled,
                slices,
                &masks,
                &dir,
                ctx.config.eval.error_gain,
            )? {
                out.record(f);
            }
        }
    }
    let path = out.finish("report", &ctx.hash())?;
    println!("{}", path.display());
    Ok(())
}
