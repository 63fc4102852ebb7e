use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gsnake::dataset::{self, DatasetManifest, Split};
use gsnake::diff::checkpoint;
use gsnake::evolution::{boxes_from_energy, evolve, oracle_offsets, InstanceRecord};
use gsnake::geometry::{draw_outline, resample, Contour, Mask};
use gsnake::model::SnakeModel;
use gsnake::pnm;
use gsnake::trainer::{
    ablation_table, evaluate, evaluate_with, train_energy, train_snake, AblationRow, BoxSource, EpochLog, RunConfig,
    ABLATION_GRID, DEFAULT_ENERGY_THRESHOLD,
};
use gsnake::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gsnake", version, about = "Contour-evolution instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Energy,
    Snake,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoxesArg {
    Gt,
    Energy,
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    energy_epochs: Option<usize>,
    #[arg(long)]
    snake_epochs: Option<usize>,
    /// Drop the DCIM features over the energy map; the head samples the image alone.
    #[arg(long)]
    no_demp_dcim: bool,
    /// Drop the attention step of the offset head.
    #[arg(long)]
    no_amem: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "128x128", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Train the energy net, the contour heads, or both.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "gt")]
        boxes: BoxesArg,
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
        #[arg(long, default_value_t = DEFAULT_ENERGY_THRESHOLD)]
        threshold: f64,
        /// Move vertices straight onto the paired ground truth instead of
        /// running the offset head.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and score the four ablation configurations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment one image using boxes from the predicted energy map.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Scene annotation JSON whose polygons are drawn in blue.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ENERGY_THRESHOLD)]
        threshold: f64,
        /// Include every iteration's contour in the JSON.
        #[arg(long)]
        iterations: bool,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        c.pipeline.seed = v;
    }
    if let Some(v) = o.points {
        c.pipeline.points = v;
    }
    if let Some(v) = o.iterations {
        c.pipeline.iterations = v;
    }
    if let Some(v) = o.energy_epochs {
        c.train.energy_epochs = v;
    }
    if let Some(v) = o.snake_epochs {
        c.train.snake_epochs = v;
    }
    c.pipeline.use_demp_dcim &= !o.no_demp_dcim;
    c.pipeline.use_amem &= !o.no_amem;
    c.validate()?;
    Ok(c)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.json"), to_json(cfg)?)
}

struct Log(fs::File);

impl Log {
    fn open(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self(f))
    }

    fn write(&mut self, l: &EpochLog) {
        if let Ok(s) = serde_json::to_string(l) {
            let _ = writeln!(self.0, "{s}");
        }
        eprintln!("{:?} epoch {:>3}  loss {:.5}  lr {:.2e}  {} ms", l.phase, l.epoch, l.loss, l.lr, l.wall_ms);
    }
}

const ENERGY_CKPT: &str = "energy.ckpt";
const MODEL_CKPT: &str = "model.ckpt";

fn run_energy(cfg: &RunConfig, train: &[dataset::Phantom], out: &Path, log: &mut Log) -> Result<SnakeModel> {
    let mut m = SnakeModel::new(cfg.pipeline)?;
    train_energy(&mut m, &cfg.train, train, &mut |l| log.write(l))?;
    checkpoint::save(&out.join(ENERGY_CKPT), &m.energy_tensors())?;
    Ok(m)
}

fn run_snake(cfg: &RunConfig, energy: &Path, train: &[dataset::Phantom], log: &mut Log) -> Result<SnakeModel> {
    let mut m = SnakeModel::new(cfg.pipeline)?;
    m.energy.params.load_named("energy.", &checkpoint::load(energy)?)?;
    train_snake(&mut m, &cfg.train, train, &mut |l| log.write(l))?;
    Ok(m)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, phase: PhaseArg, o: &Overrides) -> Result<()> {
    let cfg = load_config(config, o)?;
    prepare_out(out, &cfg)?;
    let scenes = dataset::load_split(data, Split::Train)?;
    let mut log = Log::open(&out.join("train.jsonl"))?;
    if phase != PhaseArg::Snake {
        run_energy(&cfg, &scenes, out, &mut log)?;
    }
    if phase != PhaseArg::Energy {
        let m = run_snake(&cfg, &out.join(ENERGY_CKPT), &scenes, &mut log)?;
        m.save(&out.join(MODEL_CKPT))?;
    }
    println!("{}", out.display());
    Ok(())
}

fn oracle_segment(m: &SnakeModel, s: &dataset::Phantom, boxes: &[gsnake::evolution::BBox]) -> Result<Vec<gsnake::evolution::Instance>> {
    boxes
        .iter()
        .zip(&s.instances)
        .map(|(b, a)| {
            let gt = resample(&a.polygon, m.config.points)?;
            evolve(b, m.config.points, m.config.iterations, s.width(), s.height(), oracle_offsets(&gt))
        })
        .collect()
}

fn eval(ckpt: &Path, data: &Path, split: &str, boxes: BoxesArg, jitter: f64, threshold: f64, oracle: bool) -> Result<()> {
    let split: Split = split.parse()?;
    let m = SnakeModel::load(ckpt)?;
    let scenes = dataset::load_split(data, split)?;
    let source = match boxes {
        BoxesArg::Gt => BoxSource::Gt { jitter },
        BoxesArg::Energy => BoxSource::Energy { threshold },
    };
    let report = if oracle {
        if boxes != BoxesArg::Gt {
            return Err(Error::Config("--oracle needs --boxes gt".into()));
        }
        evaluate_with(&m, &scenes, source, |m, s, _, b| oracle_segment(m, s, b))?
    } else {
        evaluate(&m, &scenes, source)?
    };
    println!("{}", to_json(&report)?);
    eprint!("{}", report.summary());
    Ok(())
}

fn ablate(config: Option<&Path>, data: &Path, out: &Path, o: &Overrides) -> Result<()> {
    let base = load_config(config, o)?;
    prepare_out(out, &base)?;
    let train = dataset::load_split(data, Split::Train)?;
    let test = dataset::load_split(data, Split::Test)?;
    let mut log = Log::open(&out.join("train.jsonl"))?;
    // the energy net does not depend on the flags, so it is trained once
    run_energy(&base, &train, out, &mut log)?;
    let mut rows = Vec::with_capacity(4);
    for (dcim, amem) in ABLATION_GRID {
        let mut cfg = base;
        cfg.pipeline.use_demp_dcim = dcim;
        cfg.pipeline.use_amem = amem;
        let dir = out.join(format!("dcim{}_amem{}", u8::from(dcim), u8::from(amem)));
        prepare_out(&dir, &cfg)?;
        let m = run_snake(&cfg, &out.join(ENERGY_CKPT), &train, &mut log)?;
        m.save(&dir.join(MODEL_CKPT))?;
        let r = evaluate(&m, &test, BoxSource::Gt { jitter: cfg.train.jitter })?;
        write_file(&dir.join("eval.json"), to_json(&r)?)?;
        rows.push(AblationRow {
            use_demp_dcim: dcim,
            use_amem: amem,
            miou: r.miou,
            mdice: r.mdice,
        });
    }
    write_file(&out.join("ablation.json"), to_json(&rows)?)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

const ITERATION_COLORS: [[u8; 3]; 3] = [[255, 0, 0], [255, 255, 0], [0, 255, 0]];
const GT_COLOR: [u8; 3] = [0, 0, 255];

fn paint(rgb: &mut [[u8; 3]], c: &Contour, w: usize, h: usize, color: [u8; 3]) {
    let mut m = Mask::new(w, h);
    draw_outline(&mut m, c);
    for (px, &on) in rgb.iter_mut().zip(m.bits()) {
        if on {
            *px = color;
        }
    }
}

#[derive(Serialize)]
struct InferOutput {
    width: usize,
    height: usize,
    instances: Vec<InstanceRecord>,
}

fn infer(ckpt: &Path, image: &Path, overlay: Option<&Path>, gt: Option<&Path>, threshold: f64, with_iterations: bool) -> Result<()> {
    let m = SnakeModel::load(ckpt)?;
    let img = pnm::read_pgm(image)?;
    let energy = m.predict_energy(&img)?;
    let boxes = boxes_from_energy(&energy, threshold)?;
    let inst = m.segment_with_energy(&img, &energy, &boxes)?;
    let out = InferOutput {
        width: img.width,
        height: img.height,
        instances: inst.iter().map(|i| InstanceRecord::new(i, with_iterations)).collect(),
    };
    println!("{}", to_json(&out)?);
    if let Some(path) = overlay {
        let (w, h) = (img.width, img.height);
        let mut rgb: Vec<[u8; 3]> = img.pixels.iter().map(|&v| [v; 3]).collect();
        if let Some(g) = gt {
            let root = g.parent().and_then(Path::parent).unwrap_or(Path::new("."));
            for a in dataset::load_scene(root, g)?.instances {
                paint(&mut rgb, &a.polygon, w, h, GT_COLOR);
            }
        }
        for i in &inst {
            for (t, c) in i.contours.iter().enumerate() {
                paint(&mut rgb, c, w, h, ITERATION_COLORS[t.min(ITERATION_COLORS.len() - 1)]);
            }
        }
        pnm::write_ppm(path, w, h, &rgb)?;
    }
    Ok(())
}

fn gen_data(out: &Path, seed: u64, count: usize, (h, w): (usize, usize)) -> Result<()> {
    let manifest = DatasetManifest::new(seed, count, w, h);
    let path = dataset::generate(out, &manifest)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, count, size } => gen_data(&out, seed, count, size),
        Command::Train {
            config,
            data,
            out,
            phase,
            overrides,
        } => train(config.as_deref(), &data, &out, phase, &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            boxes,
            jitter,
            threshold,
            oracle,
        } => eval(&checkpoint, &data, &split, boxes, jitter, threshold, oracle),
        Command::Ablate {
            config,
            data,
            out,
            overrides,
        } => ablate(config.as_deref(), &data, &out, &overrides),
        Command::Infer {
            checkpoint,
            image,
            overlay,
            gt,
            threshold,
            iterations,
        } => infer(&checkpoint, &image, overlay.as_deref(), gt.as_deref(), threshold, iterations),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
