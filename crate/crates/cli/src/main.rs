use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geomoe::augment::{augment_split, AugmentConfig};
use geomoe::data::{build_corpus, read_corpus, write_corpus, CorpusConfig, RgbImage, Task, Tokenizer, EOS};
use geomoe::metrics::{collect_routing, evaluate};
use geomoe::model::{ModelConfig, VisionLanguageModel};
use geomoe::pipeline::extend_split;
use geomoe::training::{
    fresh_check_model, grad_check, load_checkpoint, random_batch, save_checkpoint, train_stage1, train_stage2,
    Checkpoint, Dataset, GradCheckConfig, StepLog, TrainConfig,
};
use geomoe::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

mod config;

#[derive(Parser)]
#[command(name = "geomoe", version, about = "Sparse MoE vision-language model on synthetic overhead scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic instruction corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add augmented training records to a corpus.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated subset of cutout, relocate, recolor.
        #[arg(long, value_delimiter = ',', default_value = "cutout,relocate,recolor")]
        ops: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        task: String,
        /// Evaluate at most this many records per task.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, conflicts_with = "fresh", required_unless_present = "fresh")]
        ckpt: Option<PathBuf>,
        /// Check a freshly initialised routed model built from the config.
        #[arg(long)]
        fresh: bool,
        #[arg(long, default_value_t = 20)]
        n_coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer expert utilisation of a routed checkpoint.
    RouteStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Include utilisation split by local/global records.
        #[arg(long)]
        by_granularity: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy answer for one image and instruction.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// PPM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
    },
}

/// Settings of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GradRun {
    model: ModelConfig,
    check: GradCheckConfig,
    batch: usize,
    text_len: usize,
    prompt_len: usize,
}

fn grad_defaults() -> GradRun {
    GradRun {
        model: ModelConfig {
            hidden: 32,
            layers: 2,
            heads: 2,
            vocab: 64,
            experts: 4,
            top_k: 2,
            image_size: 16,
            patch_size: 4,
            channels: 16,
            ffn_width: 64,
            lora_rank: 4,
            max_text_len: 16,
            ..ModelConfig::default()
        },
        check: GradCheckConfig::default(),
        batch: 2,
        text_len: 10,
        prompt_len: 4,
    }
}

/// Numeric failure that is not a library error.
struct CheckFailed(String);

enum Failure {
    Lib(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        return 3;
    }
    match e {
        Error::Config(_) | Error::UnknownConfigKeys(_) | Error::Argument(_) => 1,
        _ => 2,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Task::ALL.to_vec());
    }
    s.split(',').map(Task::parse).collect()
}

fn gen_data(cfg: &ConfigArgs, seed: u64, out: &Path) -> Result<()> {
    let mut c: CorpusConfig = config::resolve(&CorpusConfig::default(), cfg.config.as_deref(), &cfg.set)?;
    c.seed = seed;
    let corpus = build_corpus(&c)?;
    write_corpus(out, &corpus)?;
    write(&out.join("config.txt"), &config::echo(&c)?)?;
    for (task, n) in corpus.train.task_counts() {
        println!("train {task}: {n}");
    }
    for (task, n) in corpus.test.task_counts() {
        println!("test {task}: {n}");
    }
    Ok(())
}

fn augment(input: &Path, ops: &[String], cfg: &ConfigArgs, seed: u64, out: &Path) -> Result<()> {
    let mut a: AugmentConfig = config::resolve(&AugmentConfig::default(), cfg.config.as_deref(), &cfg.set)?;
    a.seed = seed;
    a.cutout = false;
    a.relocate = false;
    a.recolor = false;
    for op in ops {
        match op.trim() {
            "cutout" => a.cutout = true,
            "relocate" => a.relocate = true,
            "recolor" => a.recolor = true,
            "" => {}
            other => return Err(Error::Config(format!("unknown augmentation op `{other}`"))),
        }
    }
    let mut corpus = read_corpus(input)?;
    let (extra, report) = augment_split(&corpus.train, &a)?;
    extend_split(&mut corpus.train, extra);
    write_corpus(out, &corpus)?;
    write(&out.join("config.txt"), &config::echo(&a)?)?;
    let rep = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    write(&out.join("augment_report.json"), &(rep.clone() + "\n"))?;
    println!("{rep}");
    Ok(())
}

fn train(stage: u8, cfg: &ConfigArgs, data: &Path, init: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let corpus = read_corpus(data)?;
    let (defaults, init_model) = match (stage, init) {
        (1, None) => (
            TrainRun {
                model: ModelConfig::default(),
                train: TrainConfig::default(),
            },
            None,
        ),
        (1, Some(_)) => return Err(Error::Config("--init applies to stage 2 only".into())),
        (2, None) => return Err(Error::Config("stage 2 requires --init <stage-1 checkpoint>".into())),
        (2, Some(path)) => {
            let ck = load_checkpoint(path)?;
            let run = TrainRun {
                model: ck.model.config.clone(),
                train: TrainConfig {
                    stage: 2,
                    ..TrainConfig::default()
                },
            };
            (run, Some(ck.model))
        }
        (s, _) => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    let mut run: TrainRun = config::resolve(&defaults, cfg.config.as_deref(), &cfg.set)?;
    run.train.stage = stage;
    run.train.seed = seed;
    run.model.validate()?;
    mkdir(out)?;
    write(&out.join("config.txt"), &config::echo(&run)?)?;

    let data = Dataset::<f64>::from_split(&corpus.train, &Tokenizer::standard(), &run.model)?;
    let mut rows = Vec::new();
    let mut on_step = |l: &StepLog| {
        if l.step % 50 == 0 {
            println!("stage {} epoch {} step {} loss {:.4}", l.stage, l.epoch, l.step, l.total);
        }
        rows.push(l.csv_row());
    };
    let state = match init_model {
        None => {
            let model = VisionLanguageModel::new(run.model.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            train_stage1(model, &data, &run.train, &mut on_step)?
        }
        Some(mut model) => {
            let routing_only = ModelConfig {
                experts: model.config.experts,
                top_k: model.config.top_k,
                moe_period: model.config.moe_period,
                router_init_std: model.config.router_init_std,
                alpha: model.config.alpha,
                ..run.model.clone()
            };
            if routing_only != model.config {
                return Err(Error::Config(
                    "stage 2 may only change model.experts, top_k, moe_period, router_init_std and alpha".into(),
                ));
            }
            model.config = run.model.clone();
            train_stage2(model, &data, &run.train, &mut on_step)?
        }
    };
    let mut log = StepLog::csv_header(&state.model.moe_layers()) + "\n";
    for r in rows {
        log.push_str(&r);
        log.push('\n');
    }
    write(&out.join("train_log.csv"), &log)?;
    let epochs = serde_json::to_string_pretty(&state.epochs).map_err(|e| Error::Parse(e.to_string()))?;
    write(&out.join("epochs.json"), &(epochs + "\n"))?;
    save_checkpoint(&Checkpoint::from_state(&state), &out.join("model.ckpt"))?;
    if let Some(e) = state.epochs.last() {
        println!("final epoch: regressive {:.4} total {:.4}", e.regressive, e.total);
        for l in &e.layers {
            println!("layer {} load loss {:.4} entropy {:.4}", l.layer, l.loss, l.entropy);
        }
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, task: &str, limit: Option<usize>, out: &Path) -> Result<()> {
    let tasks = parse_tasks(task)?;
    let ck = load_checkpoint(ckpt)?;
    let corpus = read_corpus(data)?;
    let mut ev = evaluate(&ck.model, &corpus.test, &Tokenizer::standard(), &tasks, limit)?;
    ev.write(out)?;
    print!("{}", ev.to_csv());
    Ok(())
}

fn grad_check_cmd(
    ckpt: Option<&Path>,
    n_coords: usize,
    eps: f64,
    tol: f64,
    seed: u64,
    cfg: &ConfigArgs,
    out: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let mut run: GradRun = config::resolve(&grad_defaults(), cfg.config.as_deref(), &cfg.set)?;
    run.check.coords = n_coords;
    run.check.eps = eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = match ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => fresh_check_model(&run.model, &mut rng)?,
    };
    let mc = model.config.clone();
    let len = run.text_len.min(mc.max_text_len);
    let report = grad_check(
        &model,
        |r| random_batch(&mc, run.batch, len, run.prompt_len.min(len - 1), r),
        &run.check,
        &mut rng,
    )?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(dir) = out {
        mkdir(dir)?;
        write(&dir.join("grad_check.csv"), &csv)?;
        write(&dir.join("config.txt"), &config::echo(&run)?)?;
    }
    let worst = report.max_rel_error();
    if worst >= tol {
        return Err(Failure::Check(CheckFailed(format!("max relative error {worst:.3e} exceeds {tol:.1e}"))));
    }
    println!("max relative error {worst:.3e} < {tol:.1e}");
    Ok(())
}

fn route_stats(ckpt: &Path, data: &Path, by_granularity: bool, limit: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let corpus = read_corpus(data)?;
    let ds = Dataset::<f64>::from_split(&corpus.test, &Tokenizer::standard(), &ck.model.config)?;
    let mut rep = collect_routing(&ck.model, &ds, limit)?;
    if !by_granularity {
        rep.by_granularity.clear();
    }
    let csv = rep.to_csv();
    print!("{csv}");
    if let Some(dir) = out {
        mkdir(dir)?;
        write(&dir.join("routing.csv"), &csv)?;
    }
    Ok(())
}

fn generate(ckpt: &Path, image: &Path, prompt: &str, max_tokens: usize) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let img = RgbImage::load_ppm(image)?;
    if img.width != ck.model.config.image_size || img.height != ck.model.config.image_size {
        return Err(Error::Argument(format!(
            "image is {}x{}, model expects {}",
            img.width, img.height, ck.model.config.image_size
        )));
    }
    let tok = Tokenizer::standard();
    let ids = tok.encode_prompt(prompt)?;
    let out = ck.model.generate(&img.to_tensor(), &ids, EOS, max_tokens)?;
    println!("{}", tok.decode(&out));
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData { cfg, seed, out } => gen_data(&cfg, seed, &out)?,
        Command::Augment {
            input,
            ops,
            cfg,
            seed,
            out,
        } => augment(&input, &ops, &cfg, seed, &out)?,
        Command::Train {
            stage,
            cfg,
            data,
            init,
            seed,
            out,
        } => train(stage, &cfg, &data, init.as_deref(), seed, &out)?,
        Command::Eval {
            ckpt,
            data,
            task,
            limit,
            out,
        } => eval(&ckpt, &data, &task, limit, &out)?,
        Command::GradCheck {
            ckpt,
            fresh: _,
            n_coords,
            eps,
            tol,
            seed,
            cfg,
            out,
        } => grad_check_cmd(ckpt.as_deref(), n_coords, eps, tol, seed, &cfg, out.as_deref())?,
        Command::RouteStats {
            ckpt,
            data,
            by_granularity,
            limit,
            out,
        } => route_stats(&ckpt, &data, by_granularity, limit, out.as_deref())?,
        Command::Generate {
            ckpt,
            image,
            prompt,
            max_tokens,
        } => generate(&ckpt, &image, &prompt, max_tokens)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
