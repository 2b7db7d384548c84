use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridclip::config::ExperimentConfig;
use gridclip::data::{generate_dataset, load_dataset, save_dataset, CategorySplit, DataSplit, Dataset, GenerateParams};
use gridclip::eval::{
    category_count_histogram, closed_set_eval, curve_rows, model_image_embeddings, open_set_eval, rc_at_k,
    run_detection, teacher_image_embeddings, transfer_eval, write_curve_csv, write_histogram_csv, write_rc_csv,
    EvalReport, DEFAULT_K_LIST, DEFAULT_WINDOW,
};
use gridclip::model::GridClip;
use gridclip::params::{load_checkpoint, save_checkpoint, ParamStore};
use gridclip::postprocess::write_detections_jsonl;
use gridclip::teacher::Teacher;
use gridclip::text_bank::{EmbeddingBank, SyntheticTextEncoder};
use gridclip::train::{run_training, write_trace_csv};

#[derive(Parser)]
#[command(name = "gridclip", about = "Grid-level open-vocabulary detector at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Closed,
    Open,
    Transfer,
}

#[derive(Clone, Copy, ValueEnum)]
enum BankSplit {
    Base,
    Novel,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic long-tail corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        categories: usize,
        #[arg(long, default_value_t = 600)]
        images: usize,
        #[arg(long, default_value_t = 1.2)]
        zipf: f64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a category embedding bank from a corpus manifest.
    BuildBank {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BankSplit::Base)]
        split: BankSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin, trace.csv, bank.bin and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; generated with the default recipe under OUT/data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json, detections.jsonl and plot CSVs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Closed)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image-level recall of ground-truth categories among the top-k ranked ones.
    AnalyzeRc {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bank to rank against; all corpus categories when absent.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate with a replacement bank at the transfer NMS IoU.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_model(ckpt: &Path) -> Result<(ExperimentConfig, GridClip, ParamStore)> {
    let (store, meta) = load_checkpoint(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let toml = meta
        .get("config")
        .and_then(|v| v.as_str())
        .context("checkpoint carries no config")?;
    let config = ExperimentConfig::from_toml_str(toml)?;
    let model = GridClip::bind(&config, &store)?;
    Ok((config, model, store))
}

fn write_csv<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(BufWriter<fs::File>) -> gridclip::Result<()>,
{
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(BufWriter::new(file))?;
    Ok(())
}

fn gen_data(seed: u64, categories: usize, images: usize, zipf: f64, size: usize, out: &Path) -> Result<()> {
    let mut params = GenerateParams::new(seed, categories, images, zipf);
    params.image_size = (size, size);
    let (manifest, imgs) = generate_dataset(&params)?;
    save_dataset(out, &manifest, &imgs)?;
    for c in &manifest.categories {
        log::info!("{} freq {} {:?} {:?}", c.name, c.image_frequency, c.bucket, c.split);
    }
    println!(
        "wrote {} images ({} train, {} val) to {}",
        imgs.len(),
        manifest.counts.train,
        manifest.counts.val,
        out.display()
    );
    Ok(())
}

fn build_bank(dataset: &Path, config: Option<&Path>, split: BankSplit, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let data = load_dataset(dataset)?;
    let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim);
    let bank = match split {
        BankSplit::Base => enc.bank_for_split(&data.manifest, CategorySplit::Base)?,
        BankSplit::Novel => enc.bank_for_split(&data.manifest, CategorySplit::Novel)?,
        BankSplit::All => enc.bank_for_all(&data.manifest)?,
    };
    bank.save(out)?;
    println!("{} categories, hash {}", bank.len(), bank.content_hash());
    Ok(())
}

fn train(config_path: &Path, out: &Path, data: Option<&Path>) -> Result<()> {
    let config = load_config(Some(config_path))?;
    fs::create_dir_all(out)?;
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = out.join("data");
            if !d.join("manifest.json").exists() {
                let s = config.image_size.0;
                gen_data(0, 12, 600, 1.2, s, &d)?;
            }
            d
        }
    };
    let dataset = load_dataset(&data_dir)?;
    let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim);
    let bank = enc.bank_for_split(&dataset.manifest, CategorySplit::Base)?;
    let teacher = Teacher::from_config(&config)?;
    let started = std::time::Instant::now();
    let outcome = run_training(&config, &dataset, &bank, &teacher)?;
    let meta = serde_json::json!({
        "config": config.to_toml_string()?,
        "bank_hash": bank.content_hash(),
        "teacher_hash": outcome.teacher_hash_end,
        "iterations": outcome.trace.len(),
    });
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.store, meta)?;
    bank.save(&out.join("bank.bin"))?;
    fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    write_csv(&out.join("trace.csv"), |w| write_trace_csv(w, &outcome.trace))?;
    if outcome.teacher_hash_start != outcome.teacher_hash_end {
        bail!("teacher parameters changed during training");
    }
    println!(
        "trained {} iterations in {:.1}s; final total {:.4}",
        outcome.trace.len(),
        started.elapsed().as_secs_f64(),
        outcome.trace.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn print_summary(r: &EvalReport) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "mode {} nms {}: AP {} AP50 {} AP75 {} | APr {} APc {} APf {} | base {} novel {} | base AP50 {} novel AP50 {}",
        r.settings.mode,
        r.settings.nms_iou,
        f(r.ap),
        f(r.ap50),
        f(r.ap75),
        f(r.ap_r),
        f(r.ap_c),
        f(r.ap_f),
        f(r.ap_base),
        f(r.ap_novel),
        f(r.ap50_base),
        f(r.ap50_novel)
    );
}

fn eval(ckpt: &Path, bank_path: &Path, dataset: &Path, mode: Mode, out: Option<&Path>) -> Result<()> {
    let (config, model, store) = load_model(ckpt)?;
    let data: Dataset = load_dataset(dataset)?;
    let bank = EmbeddingBank::load(bank_path)?;
    let val = data.split(DataSplit::Val);
    let (report, used_bank) = match mode {
        Mode::Closed => (closed_set_eval(&model, &store, &config, &val, &data.manifest, &bank)?, bank),
        Mode::Open => {
            let enc = SyntheticTextEncoder::from_config(&config.text, config.embed_dim);
            let novel: Vec<String> = data
                .manifest
                .all_names()
                .into_iter()
                .filter(|n| bank.index_of(n).is_none())
                .collect();
            let r = open_set_eval(&model, &store, &config, &val, &data.manifest, &bank, &novel, &enc)?;
            (r, gridclip::text_bank::extend_bank_open_set(&bank, &novel, &enc)?)
        }
        Mode::Transfer => (transfer_eval(&model, &store, &config, &val, &data.manifest, &bank)?, bank),
    };
    print_summary(&report);
    let Some(out) = out else {
        println!("{}", report.to_json()?);
        return Ok(());
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    let records = run_detection(&model, &store, &config, &val, &used_bank, report.settings.nms_iou)?;
    write_csv(&out.join("detections.jsonl"), |w| write_detections_jsonl(w, &records))?;
    let train_imgs = data.split(DataSplit::Train);
    let curve = curve_rows(&report, &train_imgs, DEFAULT_WINDOW);
    write_csv(&out.join("curve_ap_by_frequency.csv"), |w| write_curve_csv(w, &curve))?;
    let emb = model_image_embeddings(&model, &store, &config, &val, &used_bank)?;
    let rc = rc_at_k(&emb, &val, &used_bank, &DEFAULT_K_LIST)?;
    write_csv(&out.join("rc_at_k.csv"), |w| write_rc_csv(w, &rc.rows))?;
    let hist = category_count_histogram(&val);
    write_csv(&out.join("category_histogram.csv"), |w| write_histogram_csv(w, &hist))?;
    println!("wrote results to {}", out.display());
    Ok(())
}

fn analyze_rc(dataset: &Path, config: Option<&Path>, bank: Option<&Path>, k: Option<Vec<usize>>, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let data = load_dataset(dataset)?;
    let bank = match bank {
        Some(p) => EmbeddingBank::load(p)?,
        None => SyntheticTextEncoder::from_config(&config.text, config.embed_dim).bank_for_all(&data.manifest)?,
    };
    let ks = k.unwrap_or_else(|| DEFAULT_K_LIST.to_vec());
    let teacher = Teacher::from_config(&config)?;
    let images: Vec<_> = data.images.iter().collect();
    let emb = teacher_image_embeddings(&teacher, &images, bank.dim())?;
    let rc = rc_at_k(&emb, &images, &bank, &ks)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("rc_at_k.csv"), |w| write_rc_csv(w, &rc.rows))?;
    let hist = category_count_histogram(&images);
    write_csv(&out.join("category_histogram.csv"), |w| write_histogram_csv(w, &hist))?;
    for row in &rc.rows {
        println!("RC@{} = {:.4}", row.k, row.recall);
    }
    if rc.skipped > 0 {
        println!("{} images without bank categories skipped", rc.skipped);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData {
            seed,
            categories,
            images,
            zipf,
            size,
            out,
        } => gen_data(seed, categories, images, zipf, size, &out),
        Cmd::BuildBank { dataset, config, split, out } => build_bank(&dataset, config.as_deref(), split, &out),
        Cmd::Train { config, out, data } => train(&config, &out, data.as_deref()),
        Cmd::Eval {
            ckpt,
            bank,
            dataset,
            mode,
            out,
        } => eval(&ckpt, &bank, &dataset, mode, out.as_deref()),
        Cmd::AnalyzeRc { dataset, config, bank, k, out } => analyze_rc(&dataset, config.as_deref(), bank.as_deref(), k, &out),
        Cmd::Transfer { ckpt, bank, dataset, out } => eval(&ckpt, &bank, &dataset, Mode::Transfer, out.as_deref()),
    }
}
