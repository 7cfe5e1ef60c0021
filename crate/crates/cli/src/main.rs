use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use concat_core::config::{Mode, RunConfig};
use concat_core::datagen::SyntheticDataset;
use concat_core::matching::{hungarian, mask_cost_matrix};
use concat_core::metrics::MetricsReport;
use concat_core::models::{standard_normal, Generator, SemanticProjector};
use concat_core::pipeline::{
    epoch_losses, evaluate_split, train_stage1, train_stage2, union_finetune, RunDir, Stage2Output,
    Stage3Output,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "concat-lab", version, about = "Three-stage zero-shot panoptic segmentation on synthetic data")]
struct Cli {
    /// JSON run config. Defaults to <out>/config.json when present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Run and dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. --set losses.lambda_r=0. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inductive,
    Transductive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store the synthetic dataset.
    Datagen,
    /// Train the semantic projector.
    Stage1,
    /// Train the query generator (needs stage 1).
    Stage2,
    /// Union-finetune the projector (needs stages 1 and 2, transductive only).
    Stage3,
    /// Evaluate the configured mode's projector on the test split.
    Eval,
    /// All stages for the configured mode, then evaluation.
    Pipeline {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Write projected real and generated queries with labels as CSV.
    ExportEmbeddings {
        /// Generated samples per category.
        #[arg(long, default_value_t = 50)]
        per_category: usize,
    },
    /// Run the full method and each switch set, then print a comparison.
    /// Switches: qc=off sup=off cia=off cond=off fcls=off bank=N; join
    /// several with commas to form one variant.
    Ablate {
        #[arg(required = true)]
        variants: Vec<String>,
    },
}

fn resolve_config(cli: &Cli, mode: Option<ModeArg>) -> Result<RunConfig> {
    let stored = cli.out.join("config.json");
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None if stored.exists() => RunConfig::load(&stored).with_context(|| format!("reading {}", stored.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Inductive => Mode::Inductive,
            ModeArg::Transductive => Mode::Transductive,
        };
    }
    Ok(cfg.apply_overrides(&cli.set)?)
}

fn ensure_no_unseen_reads(ds: &SyntheticDataset, stage: u8) -> Result<()> {
    let n = ds.table.unseen_access_count();
    if n != 0 {
        bail!("stage {stage} read unseen embeddings {n} times");
    }
    Ok(())
}

fn stage1(rd: &RunDir, cfg: &RunConfig, ds: &SyntheticDataset) -> Result<Vec<f64>> {
    ds.table.reset_access_log();
    let out = train_stage1(&ds.train, &ds.table.seen(), cfg)?;
    ensure_no_unseen_reads(ds, 1)?;
    rd.save_projector(1, &out.projector)?;
    rd.write_log(1, &out.log)?;
    Ok(epoch_losses(&out.log))
}

fn stage2(rd: &RunDir, cfg: &RunConfig, ds: &SyntheticDataset) -> Result<Stage2Output> {
    let projector = rd.load_projector(1)?;
    ds.table.reset_access_log();
    let out = train_stage2(&ds.train, &ds.table.seen(), &projector, cfg)?;
    ensure_no_unseen_reads(ds, 2)?;
    rd.save_generator(&out.generator)?;
    rd.write_log(2, &out.log)?;
    Ok(out)
}

fn stage3(rd: &RunDir, cfg: &RunConfig, ds: &SyntheticDataset) -> Result<Stage3Output> {
    if cfg.mode != Mode::Transductive {
        bail!("stage 3 needs unseen embeddings; set mode to transductive");
    }
    let projector = rd.load_projector(1)?;
    let generator = rd.load_generator(cfg)?;
    let out = union_finetune(ds, &generator, projector, cfg)?;
    rd.save_projector(3, &out.projector)?;
    rd.write_log(3, &out.log)?;
    let best = out.best().map(|(epoch, r)| serde_json::json!({ "epoch": epoch, "report": r }));
    let summary = serde_json::json!({
        "best": best,
        "final": out.epoch_reports.last(),
    });
    fs::write(rd.root().join("stage3_epochs.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(out)
}

fn final_projector(rd: &RunDir, cfg: &RunConfig) -> Result<SemanticProjector> {
    Ok(match cfg.mode {
        Mode::Inductive => rd.load_projector(1)?,
        Mode::Transductive => rd.load_projector(3)?,
    })
}

fn eval(rd: &RunDir, cfg: &RunConfig, ds: &SyntheticDataset) -> Result<MetricsReport> {
    let projector = final_projector(rd, cfg)?;
    let report = evaluate_split(&ds.test, &projector, &ds.table, cfg.mode)?;
    rd.write_metrics(&report)?;
    Ok(report)
}

fn write_summary(path: &Path, cfg: &RunConfig, report: &MetricsReport, s1: &[f64], s2: Option<&Stage2Output>, s3: Option<&Stage3Output>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed", "mode", "sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU", "stage1_loss_first", "stage1_loss_final",
        "stage2_mmd_first", "stage2_mmd_final", "stage3_best_epoch", "stage3_best_hPQ",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let best = s3.and_then(|s| s.best());
    w.write_record([
        cfg.seed.to_string(),
        format!("{:?}", cfg.mode).to_lowercase(),
        report.s_pq.to_string(),
        report.u_pq.to_string(),
        report.h_pq.to_string(),
        report.s_iou.to_string(),
        report.u_iou.to_string(),
        report.h_iou.to_string(),
        opt(s1.first().copied()),
        opt(s1.last().copied()),
        opt(s2.and_then(|s| s.mmd_per_epoch.first().copied())),
        opt(s2.and_then(|s| s.mmd_per_epoch.last().copied())),
        best.map(|(e, _)| e.to_string()).unwrap_or_default(),
        opt(best.map(|(_, r)| r.h_pq)),
    ])?;
    w.flush()?;
    Ok(())
}

fn pipeline(rd: &RunDir, cfg: &RunConfig) -> Result<MetricsReport> {
    let ds = rd.dataset(cfg)?;
    let s1 = stage1(rd, cfg, &ds)?;
    let (s2, s3) = if cfg.mode == Mode::Transductive {
        let s2 = stage2(rd, cfg, &ds)?;
        let s3 = stage3(rd, cfg, &ds)?;
        (Some(s2), Some(s3))
    } else {
        (None, None)
    };
    let report = eval(rd, cfg, &ds)?;
    write_summary(&rd.root().join("summary.csv"), cfg, &report, &s1, s2.as_ref(), s3.as_ref())?;
    Ok(report)
}

fn export_embeddings(rd: &RunDir, cfg: &RunConfig, ds: &SyntheticDataset, per_category: usize) -> Result<PathBuf> {
    let projector = match cfg.mode {
        Mode::Transductive if rd.require_stage(3).is_ok() => rd.load_projector(3)?,
        _ => rd.load_projector(1)?,
    };
    let generator: Generator = rd.load_generator(cfg)?;
    let path = rd.root().join("embeddings.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let c = projector.d_out();
    let mut header = vec!["kind".to_string(), "category".into(), "seen".into()];
    header.extend((0..c).map(|i| format!("s{i}")));
    w.write_record(&header)?;
    let mut write_rows = |kind: &str, cats: &[usize], s: &concat_core::Tensor| -> Result<()> {
        for (r, &cat) in cats.iter().enumerate() {
            let mut rec = vec![kind.to_string(), cat.to_string(), ds.table.is_seen(cat).to_string()];
            rec.extend(s.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    };
    // real queries: test segments matched to queries by mask cost alone
    for img in &ds.test {
        let masks: Vec<&[bool]> = img.gt_segments.iter().map(|s| s.mask.as_slice()).collect();
        let cost = mask_cost_matrix(&img.pred_mask_logits, &masks, cfg.losses.mask_bce_weight, cfg.losses.mask_dice_weight)?;
        let asg = hungarian(&cost)?;
        let q_of = asg.segment_to_query(masks.len());
        let qs: Vec<usize> = q_of.iter().flatten().copied().collect();
        let cats: Vec<usize> = img.gt_segments.iter().map(|s| s.category).collect();
        let s = projector.project(&img.vision_queries.select_rows(&qs)?)?;
        write_rows("real", &cats, &s)?;
    }
    let categories: Vec<usize> = match cfg.mode {
        Mode::Transductive => (0..ds.table.n_categories()).collect(),
        Mode::Inductive => ds.table.seen_ids().to_vec(),
    };
    let all = if cfg.mode == Mode::Transductive {
        ds.table.all().clone()
    } else {
        let mut t = concat_core::Tensor::zeros(&[ds.table.n_categories(), ds.table.dim()]);
        for &c in ds.table.seen_ids() {
            t.row_mut(c).copy_from_slice(ds.table.seen_row(c).expect("seen id"));
        }
        t
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &cat in &categories {
        let z = standard_normal(&mut rng, per_category, generator.latent_dim());
        let cond = all.select_rows(&vec![cat; per_category])?;
        let s = projector.project(&generator.generate(&z, &cond)?)?;
        write_rows("generated", &vec![cat; per_category], &s)?;
    }
    w.flush()?;
    Ok(path)
}

fn switch_overrides(variant: &str) -> Result<Vec<String>> {
    variant
        .split(',')
        .map(|sw| {
            Ok(match sw.trim() {
                "qc=off" => "losses.lambda_r=0".to_string(),
                "sup=off" => "losses.lambda_f=0".to_string(),
                "cia=off" => "losses.lambda_c=0".to_string(),
                "cond=off" => "losses.gamma_cond=0".to_string(),
                "fcls=off" => "losses.fcls_weight=0".to_string(),
                s if s.starts_with("bank=") => {
                    let n: usize = s[5..].parse().with_context(|| format!("bad bank size in `{s}`"))?;
                    format!("losses.bank_size={n}")
                }
                other => bail!("unknown ablation switch `{other}`"),
            })
        })
        .collect()
}

fn ablate(rd: &RunDir, cfg: &RunConfig, variants: &[String]) -> Result<()> {
    let full = RunDir::create(&rd.root().join("ablate").join("full"))?;
    full.write_config(cfg)?;
    let mut rows = vec![("full".to_string(), String::new(), pipeline(&full, cfg)?)];
    for v in variants {
        let overrides = switch_overrides(v)?;
        let vcfg = cfg.apply_overrides(&overrides)?;
        let name = v.replace(['=', ','], "_");
        let d = RunDir::create(&rd.root().join("ablate").join(&name))?;
        d.write_config(&vcfg)?;
        rows.push((v.clone(), overrides.join(" "), pipeline(&d, &vcfg)?));
    }
    let mut w = csv::Writer::from_path(rd.root().join("ablation.csv"))?;
    w.write_record(["variant", "overrides", "sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU"])?;
    println!("| variant | sPQ | uPQ | hPQ | sIoU | uIoU | hIoU |");
    println!("|---|---|---|---|---|---|---|");
    for (name, ov, r) in &rows {
        w.write_record([
            name.clone(),
            ov.clone(),
            r.s_pq.to_string(),
            r.u_pq.to_string(),
            r.h_pq.to_string(),
            r.s_iou.to_string(),
            r.u_iou.to_string(),
            r.h_iou.to_string(),
        ])?;
        println!(
            "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.s_pq, r.u_pq, r.h_pq, r.s_iou, r.u_iou, r.h_iou
        );
    }
    w.flush()?;
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!(
        "sPQ {:.4}  uPQ {:.4}  hPQ {:.4}  sIoU {:.4}  uIoU {:.4}  hIoU {:.4}",
        r.s_pq, r.u_pq, r.h_pq, r.s_iou, r.u_iou, r.h_iou
    );
}

fn run(cli: Cli) -> Result<()> {
    let mode = match &cli.command {
        Command::Pipeline { mode } => *mode,
        _ => None,
    };
    let cfg = resolve_config(&cli, mode)?;
    let rd = RunDir::create(&cli.out)?;
    rd.write_config(&cfg)?;
    match &cli.command {
        Command::Datagen => {
            let ds = rd.dataset(&cfg)?;
            println!("dataset digest {}", ds.digest()?);
        }
        Command::Stage1 => {
            let ds = rd.dataset(&cfg)?;
            let losses = stage1(&rd, &cfg, &ds)?;
            println!("stage 1 done, final epoch loss {:.6}", losses.last().copied().unwrap_or(0.0));
        }
        Command::Stage2 => {
            rd.require_stage(1)?;
            let ds = rd.dataset(&cfg)?;
            let out = stage2(&rd, &cfg, &ds)?;
            println!("stage 2 done, probe mmd {:.6}", out.mmd_per_epoch.last().copied().unwrap_or(0.0));
        }
        Command::Stage3 => {
            rd.require_stage(1)?;
            rd.require_stage(2)?;
            let ds = rd.dataset(&cfg)?;
            let out = stage3(&rd, &cfg, &ds)?;
            if let Some(r) = out.epoch_reports.last() {
                print_report(r);
            }
        }
        Command::Eval => {
            let ds = rd.dataset(&cfg)?;
            print_report(&eval(&rd, &cfg, &ds)?);
        }
        Command::Pipeline { .. } => {
            let r = pipeline(&rd, &cfg)?;
            print_report(&r);
        }
        Command::ExportEmbeddings { per_category } => {
            rd.require_stage(1)?;
            rd.require_stage(2)?;
            let ds = rd.dataset(&cfg)?;
            let path = export_embeddings(&rd, &cfg, &ds, *per_category)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { variants } => ablate(&rd, &cfg, variants)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
