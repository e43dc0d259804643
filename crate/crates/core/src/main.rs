use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use cgcv::cgcv::GateMode;
use cgcv::checkpoint::{read_checkpoint, write_checkpoint};
use cgcv::corr::{write_volume, LookupConfig};
use cgcv::gradcheck::{check_all, mean_epe, train_toy_with, GradcheckConfig, Sample, TrainConfig};
use cgcv::io::config::{parse_switch, ConfigFile};
use cgcv::io::flo::write_flo;
use cgcv::io::pnm::{read_image, write_pgm};
use cgcv::io::synth::{parse_synth_specs, read_dataset, synth_pair, write_dataset};
use cgcv::io::viz::{channel_image, dump_plane, flow_to_color, write_png, VolumeSource};
use cgcv::io::write_atomic;
use cgcv::model::{estimate_flow, image_features, volume_parts, ModelConfig, ModelParams, RunConfig};
use cgcv::{CgcvError, Result};

#[derive(Parser, Debug)]
#[command(name = "cgcv", version, about = "Context guided correlation volumes for optical flow")]
struct Cli {
    /// `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Weights; without one the network starts from `--init`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// sigmoid, softmax or none
    #[arg(long)]
    gate: Option<String>,
    /// on or off
    #[arg(long)]
    lift: Option<String>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// zero or random, used without a checkpoint
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate flow between two frames.
    Flow {
        reference: PathBuf,
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate synthetic pairs with ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dump one target-grid plane of a volume term.
    Volume {
        reference: PathBuf,
        target: PathBuf,
        /// Reference cell as `row,col`.
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "V")]
        which: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the whole volume in CGCV format.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gate: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the desk-scale model on a synthetic dataset.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write encoder feature channels as grayscale images.
    Features {
        image: PathBuf,
        /// matching, net or inp
        #[arg(long)]
        which: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
}

const CONFIG_KEYS: [&str; 13] =
    ["ckpt", "gate", "lift", "radius", "levels", "iters", "init", "seed", "epochs", "lr", "clip", "samples", "which"];

struct Settings {
    file: ConfigFile,
}

impl Settings {
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.parsed(key),
        }
    }

    fn text(&self, flag: &Option<String>, key: &str) -> Option<String> {
        flag.clone().or_else(|| self.file.get(key).map(str::to_string))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CgcvError::Usage(format!("no such file: {}", p.display())))
    }
}

/// Lookup radius and level count whose window count matches `channels`.
fn infer_lookup(channels: usize, radius: Option<usize>, levels: Option<usize>) -> Result<LookupConfig> {
    let candidates: Vec<LookupConfig> = (1..=8)
        .flat_map(|l| (0..=8).map(move |r| LookupConfig { radius: r, num_levels: l }))
        .filter(|c| c.feature_len() == channels)
        .filter(|c| radius.is_none_or(|r| r == c.radius) && levels.is_none_or(|l| l == c.num_levels))
        .collect();
    match candidates[..] {
        [c] => Ok(c),
        [] => Err(CgcvError::Config(format!("no radius/levels pair gives {channels} lookup channels"))),
        _ => Err(CgcvError::Usage("set --radius and --levels to match the checkpoint".into())),
    }
}

struct Loaded {
    params: ModelParams<f64>,
    run: RunConfig,
}

fn load_model(s: &Settings, a: &ModelArgs) -> Result<Loaded> {
    let gate: GateMode = s.text(&a.gate, "gate").as_deref().unwrap_or("sigmoid").parse()?;
    let lift = s.text(&a.lift, "lift").as_deref().map(parse_switch).transpose()?.unwrap_or(true);
    let radius = s.pick(a.radius, "radius")?;
    let levels = s.pick(a.levels, "levels")?;
    let iters = s.pick(a.iters, "iters")?;
    let ckpt = s.pick(a.ckpt.clone(), "ckpt")?;
    if let Some(path) = ckpt {
        require_file(&path)?;
        let params = read_checkpoint(std::fs::File::open(&path)?, gate, lift)?.cast::<f64>();
        let lookup_channels = params.gru.input_channels() - params.net_channels() - 2;
        let lookup = infer_lookup(lookup_channels, radius, levels)?;
        let run = RunConfig { lookup, iterations: iters.unwrap_or(cgcv::refine::DEFAULT_ITERATIONS) };
        params.check_run(&run)?;
        return Ok(Loaded { params, run });
    }
    let mut cfg = ModelConfig::default();
    cfg.gate_mode = gate;
    cfg.lift_enabled = lift;
    cfg.seed = s.pick(a.seed, "seed")?.unwrap_or(0);
    cfg.lookup.radius = radius.unwrap_or(cfg.lookup.radius);
    cfg.lookup.num_levels = levels.unwrap_or(cfg.lookup.num_levels);
    cfg.refine.iterations = iters.unwrap_or(cfg.refine.iterations);
    let mut params = ModelParams::<f64>::new(&cfg)?;
    match s.text(&a.init, "init").as_deref().unwrap_or("zero") {
        "zero" => {
            let mode = (params.gate.gate_mode, params.gate.lift_enabled);
            params = params.zeros_like();
            (params.gate.gate_mode, params.gate.lift_enabled) = mode;
        }
        "random" => {}
        other => return Err(CgcvError::Usage(format!("unknown --init {other:?}, expected zero or random"))),
    }
    Ok(Loaded { params, run: cfg.run() })
}

fn read_pair(reference: &Path, target: &Path) -> Result<cgcv::encoder::ImagePair> {
    require_file(reference)?;
    require_file(target)?;
    cgcv::encoder::ImagePair::new(read_image(reference)?, read_image(target)?)
}

fn parse_query(q: &str) -> Result<(usize, usize)> {
    let bad = || CgcvError::Usage(format!("query must be `row,col`, got {q:?}"));
    let (a, b) = q.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            require_file(p)?;
            let f = ConfigFile::load(p)?;
            f.check_keys(&CONFIG_KEYS)?;
            f
        }
        None => ConfigFile::default(),
    };
    let s = Settings { file };
    match cli.command {
        Command::Flow { reference, target, out, png, model } => {
            let pair = read_pair(&reference, &target)?;
            let m = load_model(&s, &model)?;
            let flow = estimate_flow(&m.params, &pair, &m.run)?.cast::<f32>();
            write_atomic(&out, |w| write_flo(&flow, w))?;
            if let Some(p) = png {
                let img = flow_to_color(&flow);
                write_atomic(&p, |w| write_png(&img, w))?;
            }
        }
        Command::Synth { spec, out_dir } => {
            require_file(&spec)?;
            let specs = parse_synth_specs(&std::fs::read_to_string(&spec)?)?;
            let pairs = specs.iter().map(synth_pair).collect::<Result<Vec<_>>>()?;
            write_dataset(&out_dir, &pairs)?;
            println!("wrote {} pair(s) to {}", pairs.len(), out_dir.display());
        }
        Command::Volume { reference, target, query, which, out, dump, model } => {
            let pair = read_pair(&reference, &target)?;
            let (i, j) = parse_query(&query)?;
            let source: VolumeSource = which.parse()?;
            let m = load_model(&s, &model)?;
            let parts = volume_parts(&m.params, &pair, &m.run)?;
            let vol = source.select(&parts)?;
            let img = dump_plane(vol, i, j)?;
            write_atomic(&out, |w| write_pgm(&img, w))?;
            if let Some(d) = dump {
                write_atomic(&d, |w| write_volume(vol, w))?;
            }
        }
        Command::Gradcheck { seed, gate, samples } => {
            let seed = s.pick(seed, "seed")?.unwrap_or(1);
            let gate: GateMode = s.text(&gate, "gate").as_deref().unwrap_or("sigmoid").parse()?;
            let mut cfg = GradcheckConfig::desk(gate);
            cfg.samples = s.pick(samples, "samples")?.unwrap_or(cfg.samples);
            let reports = check_all(&cfg, seed)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CgcvError::Evaluation(format!("{failed} of {} gradient reports failed", reports.len())));
            }
        }
        Command::TrainToy { data, epochs, lr, clip, out, model } => {
            let set = read_dataset(&data)?;
            let samples: Vec<Sample> = set.into_iter().map(|(p, f)| (p, f.cast())).collect();
            let mut cfg = ModelConfig::toy(s.pick(model.seed, "seed")?.unwrap_or(0));
            cfg.gate_mode = s.text(&model.gate, "gate").as_deref().unwrap_or("sigmoid").parse()?;
            cfg.lift_enabled = s.text(&model.lift, "lift").as_deref().map(parse_switch).transpose()?.unwrap_or(true);
            cfg.lookup.radius = s.pick(model.radius, "radius")?.unwrap_or(cfg.lookup.radius);
            cfg.lookup.num_levels = s.pick(model.levels, "levels")?.unwrap_or(cfg.lookup.num_levels);
            cfg.refine.iterations = s.pick(model.iters, "iters")?.unwrap_or(cfg.refine.iterations);
            let init = match s.pick(model.ckpt.clone(), "ckpt")? {
                Some(p) => {
                    require_file(&p)?;
                    read_checkpoint(std::fs::File::open(&p)?, cfg.gate_mode, cfg.lift_enabled)?.cast::<f64>()
                }
                None => ModelParams::<f64>::new(&cfg)?,
            };
            let tc = TrainConfig {
                epochs: s.pick(epochs, "epochs")?.unwrap_or(200),
                learning_rate: s.pick(lr, "lr")?.unwrap_or(cgcv::gradcheck::DEFAULT_LEARNING_RATE),
                clip_norm: s.pick(clip, "clip")?.or(Some(cgcv::gradcheck::DEFAULT_CLIP_NORM)),
                run: cfg.run(),
            };
            init.check_run(&tc.run)?;
            let before = mean_epe(&init, &samples, &tc.run)?;
            let outcome = train_toy_with(&init, &samples, &tc, |e, l| println!("epoch {e} loss {l:.6}"))?;
            let after = mean_epe(&outcome.params, &samples, &tc.run)?;
            println!("epe {before:.4} -> {after:.4}");
            println!("lambda {:.4e}", outcome.params.gate.lambda);
            println!(
                "run with --radius {} --levels {} --iters {}",
                tc.run.lookup.radius, tc.run.lookup.num_levels, tc.run.iterations
            );
            write_atomic(&out, |w| write_checkpoint(&outcome.params, w))?;
        }
        Command::Features { image, which, out_dir, model } => {
            require_file(&image)?;
            let img = read_image(&image)?;
            let m = load_model(&s, &model)?;
            let (g, net, inp) = image_features(&m.params, &img)?;
            let map = match which.as_str() {
                "matching" => g,
                "net" => net,
                "inp" => inp,
                other => return Err(CgcvError::Usage(format!("unknown feature set {other:?}"))),
            };
            std::fs::create_dir_all(&out_dir)?;
            for c in 0..map.channels() {
                let gray = channel_image(&map, c)?;
                write_atomic(&out_dir.join(format!("{which}_{c:03}.pgm")), |w| write_pgm(&gray, w))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CgcvError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
