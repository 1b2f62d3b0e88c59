use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use textmage::data::{generate_synthetic_dataset_with, load_manifest, SyntheticOptions, NUM_CLASSES};
use textmage::pipeline::{
    caption_image, checkpoint_path, evaluate, hidden_sweep, select_split, train_joint_prepared, train_stage1_prepared,
    train_stage2_prepared, write_stage, Checkpoint, DecodeMode, PreparedData, RunConfig, Split, Stage,
};
use textmage::{CurvePoint, Error, Result};

#[derive(Parser)]
#[command(
    name = "textmage",
    version,
    about = "Bangla image captioning: data, training, decoding, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape dataset (PNGs plus manifest.jsonl).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side length of the generated images.
        #[arg(long, default_value_t = 32)]
        size: u32,
        /// Reword the second caption instead of repeating the first.
        #[arg(long)]
        paraphrase: bool,
    },
    /// Train one stage, or all three followed by evaluation.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption one image.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Beam width; greedy decoding when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// BLEU/METEOR/token-accuracy report, or a decoder width sweep.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated decoder hidden sizes to retrain and compare.
        #[arg(long, value_delimiter = ',')]
        hidden_sweep: Option<Vec<usize>>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Class frequency table of a manifest.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

fn print_curve(stage: &str, curve: &[CurvePoint]) {
    for p in curve {
        let val = match (p.val_loss, p.val_accuracy) {
            (Some(l), Some(a)) => format!(" val_loss {l:.6} val_acc {a:.6}"),
            _ => String::new(),
        };
        println!(
            "{stage} epoch {:>3} loss {:.6} acc {:.6}{val}",
            p.epoch, p.train_loss, p.train_accuracy
        );
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(config: &Path, stage: StageArg, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let config = RunConfig::load(config)?;
    let out = out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let manifest = load_manifest(data)?;
    let data = PreparedData::new(&config, &manifest)?;
    let run1 = matches!(stage, StageArg::One | StageArg::All);
    let run2 = matches!(stage, StageArg::Two | StageArg::All);
    let run3 = matches!(stage, StageArg::Three | StageArg::All);

    if run1 {
        let s = train_stage1_prepared(&config, &data)?;
        print_curve("stage1", &s.curve);
        write_stage(&out, Stage::Stage1, &s.checkpoint, &s.curve)?;
    }
    if run2 {
        let stage1 = Checkpoint::load(&checkpoint_path(&out, Stage::Stage1))?;
        let s = train_stage2_prepared(&config, &data, &stage1)?;
        print_curve("stage2", &s.curve);
        write_stage(&out, Stage::Stage2, &s.checkpoint, &s.curve)?;
    }
    if run3 {
        let init = if config.from_scratch {
            None
        } else {
            Some(Checkpoint::load(&checkpoint_path(&out, Stage::Stage2))?)
        };
        let s = train_joint_prepared(&config, &data, init.as_ref())?;
        print_curve("joint", &s.curve);
        write_stage(&out, Stage::Joint, &s.checkpoint, &s.curve)?;
    }
    if matches!(stage, StageArg::All) {
        let joint = Checkpoint::load(&checkpoint_path(&out, Stage::Joint))?;
        let held_out = if data.val.is_empty() { &data.train } else { &data.val };
        let report = evaluate(&joint, held_out)?;
        write_file(&out.join("report.json"), &report.to_json())?;
        print!("{}", report.to_json());
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, sweep: Option<Vec<usize>>, report: &Path, split: SplitArg) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let manifest = load_manifest(data)?;
    if let Some(sizes) = sweep {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("--hidden-sweep needs positive sizes".into()));
        }
        let entries = hidden_sweep(&checkpoint.meta.config, &manifest, &checkpoint, &sizes)?;
        for e in &entries {
            println!(
                "hidden {:>4}  BLEU-1 {:.1}  BLEU-2 {:.1}  BLEU-3 {:.1}  BLEU-4 {:.1}  METEOR {:.6}",
                e.hidden_size,
                e.report.bleu.bleu1,
                e.report.bleu.bleu2,
                e.report.bleu.bleu3,
                e.report.bleu.bleu4,
                e.report.meteor * 100.0
            );
        }
        let json = serde_json::json!({ "sweep": entries });
        let mut text = serde_json::to_string_pretty(&json).expect("sweep serializes");
        text.push('\n');
        return write_file(report, &text);
    }
    let split = match split {
        SplitArg::All => Split::All,
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let part = select_split(&checkpoint, &manifest, split)?;
    let r = evaluate(&checkpoint, &part)?;
    write_file(report, &r.to_json())?;
    print!("{}", r.to_json());
    println!("METEOR x100: {:.6}", r.meteor * 100.0);
    Ok(())
}

fn stats(data: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    let mut captions = [0usize; NUM_CLASSES];
    for s in &manifest.samples {
        captions[s.class_id] += s.captions.len();
    }
    println!("class\timages\tcaptions");
    for (class, images) in manifest.class_counts().iter().enumerate() {
        println!("{class}\t{images}\t{}", captions[class]);
    }
    println!("total\t{}\t{}", manifest.len(), manifest.caption_count());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            size,
            paraphrase,
        } => {
            let m = generate_synthetic_dataset_with(
                n,
                seed,
                &out,
                SyntheticOptions {
                    image_size: size,
                    paraphrase,
                },
            )?;
            println!(
                "wrote {} images and {} captions to {}",
                m.len(),
                m.caption_count(),
                out.join("manifest.jsonl").display()
            );
            Ok(())
        }
        Command::Train {
            config,
            stage,
            data,
            out,
        } => train(&config, stage, &data, out),
        Command::Caption { ckpt, image, beam } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let mode = match beam {
                Some(k) => DecodeMode::Beam(k),
                None => DecodeMode::Greedy,
            };
            println!("{}", caption_image(&checkpoint, &image, mode)?);
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            hidden_sweep,
            report,
            split,
        } => eval(&ckpt, &data, hidden_sweep, &report, split),
        Command::Stats { data } => stats(&data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
