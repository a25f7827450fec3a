//! The `mks` command line.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mks_core::attention::{MksBlock, MksBlockConfig};
use mks_core::backbone::{count_flops, layer_costs, Model, Variant};
use mks_core::checks::{self, UnitKind};
use mks_core::data::gen_sample;
use mks_core::erf::{erf_estimate, ErfMap};
use mks_core::metrics::class_ap;
use mks_core::nn::{Conv2d, Module};
use mks_core::ops::{conv2d_forward, ConvSpec, Mode};
use mks_core::rng::SplitMix64;
use mks_core::train::{self, ablation_run, describe};
use mks_core::{Shape, Tensor};

use crate::artifacts::{self, write_file};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::{self, AnyTensor};

#[derive(Debug, Parser)]
#[command(
    name = "mks",
    version,
    about = "Multi-kernel selection attention: checks, training, ablation and artifacts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// INI run configuration; built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed of single runs (overrides train.seed)
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory (overrides io.out)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference gradient checks in double precision
    Gradcheck {
        /// `all`, `ops`, `modules` or a unit name (see --list)
        #[arg(default_value = "all")]
        scope: String,
        /// List the registered units and exit
        #[arg(long)]
        list: bool,
        /// Scale every analytic gradient by 1 + FAULT (negative control)
        #[arg(long, hide = true, default_value_t = 0.0)]
        fault: f64,
    },
    /// Per-layer FLOPs and parameters, median forward latency and the
    /// depthwise-schedule versus dense-kernel comparison
    Bench {
        /// Timed repetitions; the median is reported
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Train one model; writes metrics.csv and the weight file
    Train {
        /// Base, Base+SA, Base+CA or Base+SA+CA (overrides model.variant)
        #[arg(long)]
        variant: Option<String>,
        /// Overrides train.epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train every variant on every seed; writes ablation.csv and per-run metrics
    Ablate {
        /// Comma-separated seeds (overrides train.seeds)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Overrides train.epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Effective receptive field; writes erf.pgm and erf.csv
    Erf {
        /// Module whose center output is traced
        #[arg(long, value_enum, default_value_t = ErfModule::Block)]
        module: ErfModule,
        /// Overrides erf.samples
        #[arg(long)]
        samples: Option<usize>,
        /// Overrides erf.size
        #[arg(long)]
        size: Option<usize>,
    },
    /// Average precision of a `positives=<n>` + `score label` fixture file
    EvalAp { file: PathBuf },
    /// Write a weight file or a tensor dump
    Export {
        #[command(subcommand)]
        what: Export,
    },
    /// Read a weight file (loading it into the configured model) or a tensor dump
    Import {
        path: PathBuf,
        /// Write the loaded weights / tensor back out to this path
        #[arg(long, value_name = "PATH")]
        write: Option<PathBuf>,
    },
    /// Print the effective configuration in INI form
    Config,
}

#[derive(Debug, Subcommand)]
pub enum Export {
    /// Model weights (seeded initialization, or loaded with --from)
    Weights {
        path: PathBuf,
        /// Start from an existing weight file instead of the seeded initialization
        #[arg(long, value_name = "PATH")]
        from: Option<PathBuf>,
        /// Overrides model.variant
        #[arg(long)]
        variant: Option<String>,
    },
    /// One synthetic image (or its target grid) as a float32 tensor dump
    Tensor {
        path: PathBuf,
        /// Sample index within the seed's stream
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Dump the target grid instead of the image
        #[arg(long)]
        target: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErfModule {
    /// One MKS block (channel + spatial attention) of the first stage
    Block,
    /// Spatial attention only
    Sa,
    /// A single dense 3×3 convolution
    Conv3,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn parse_variant(v: &str) -> Result<Variant> {
    v.parse()
        .map_err(|e: mks_core::Error| Error::config("--variant", e.to_string()))
}

fn execute(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Gradcheck { scope, list, fault } => gradcheck(&scope, list, fault),
        Command::Bench { repeats } => bench(&cfg, repeats.max(1)),
        Command::Train { variant, epochs } => {
            if let Some(v) = variant {
                cfg.train.model.variant = parse_variant(&v)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            train_cmd(&cfg)
        }
        Command::Ablate { seeds, epochs } => {
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            ablate(&cfg)
        }
        Command::Erf { module, samples, size } => {
            if let Some(s) = samples {
                cfg.erf_samples = s;
            }
            if let Some(s) = size {
                cfg.erf_size = s;
            }
            cfg.validate()?;
            erf(&cfg, module)
        }
        Command::EvalAp { file } => eval_ap(&file),
        Command::Export { what } => export(&mut cfg, what),
        Command::Import { path, write } => import(&cfg, &path, write.as_deref()),
        Command::Config => {
            print!("{}", cfg.to_ini());
            Ok(0)
        }
    }
}

fn gradcheck(scope: &str, list: bool, fault: f64) -> Result<u8> {
    if list {
        for u in checks::units() {
            let kind = match u.kind {
                UnitKind::Op => "op",
                UnitKind::Module => "module",
            };
            println!("{:<24} {kind}", u.name);
        }
        return Ok(0);
    }
    let units = checks::select(scope).map_err(|e| Error::config("gradcheck scope", e.to_string()))?;
    let mut failed = 0;
    println!(
        "{:<24} {:>12} {:>10} {:>8}  result",
        "unit", "max_rel_err", "tolerance", "checked"
    );
    for u in &units {
        let r = u.run(fault)?;
        if !r.passed {
            failed += 1;
        }
        println!(
            "{:<24} {:>12.3e} {:>10.0e} {:>8}  {}",
            u.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("{}/{} units passed", units.len() - failed, units.len());
    Ok(u8::from(failed > 0))
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn bench(cfg: &RunConfig, repeats: usize) -> Result<u8> {
    let t = &cfg.train;
    let (h, w) = (t.height, t.width);
    let mut model = Model::<f32>::seeded(t.model.clone(), cfg.seed)?;
    let costs = layer_costs(&t.model, h, w)?;
    println!("model {} on 1x{}x{h}x{w}", t.model.variant, t.model.in_channels);
    println!("{:<36} {:>10} {:>14}", "layer", "params", "FLOPs");
    for c in &costs {
        println!("{:<36} {:>10} {:>14}", c.name, c.params, c.flops());
    }
    let flops = count_flops(&t.model, h, w)?;
    let params = model.num_params() as u64;
    println!("{:<36} {:>10} {:>14}", "total", params, flops);
    let listed: u64 = costs.iter().map(|c| c.params).sum();
    if listed != params {
        return Err(Error::Failed(format!(
            "closed-form params {listed} != model params {params}"
        )));
    }

    let x = Tensor::<f32>::from_fn(Shape::new(1, t.model.in_channels, h, w), {
        let mut rng = SplitMix64::new(cfg.seed);
        move |_| rng.uniform() as f32
    });
    model.reset_macs();
    model.forward(&x, Mode::Eval)?;
    let counted = 2 * model.macs();
    println!(
        "instrumented FLOPs {counted} ({})",
        if counted == flops { "match" } else { "MISMATCH" }
    );

    println!();
    println!("{:<36} {:>14} {:>12}", "component", "FLOPs", "median_ms");
    let group = |prefix: &str| -> u64 {
        costs
            .iter()
            .filter(|c| c.name == prefix || c.name.starts_with(&format!("{prefix}.")))
            .map(|c| c.flops())
            .sum()
    };
    let mut feat = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let pe_ms = median_ms(repeats, || {
        feat = model.backbone.patch_embed.infer(&x)?;
        Ok(())
    })?;
    println!("{:<36} {:>14} {:>12.3}", "patch_embed", group("patch_embed"), pe_ms);
    for (i, st) in model.backbone.stages.iter().enumerate() {
        let input = feat.clone();
        let ms = median_ms(repeats, || {
            feat = st.infer(&input)?;
            Ok(())
        })?;
        let name = format!("stage{i}");
        println!("{:<36} {:>14} {:>12.3}", name, group(&name), ms);
    }
    let head_ms = median_ms(repeats, || model.head.infer(&feat).map(drop).map_err(Into::into))?;
    println!("{:<36} {:>14} {:>12.3}", "head", group("head"), head_ms);
    let total_ms = median_ms(repeats, || model.infer(&x).map(drop).map_err(Into::into))?;
    println!("{:<36} {:>14} {:>12.3}", "forward (whole model)", flops, total_ms);

    // same 13-pixel span: dense kernel versus the dilated depthwise branch
    let st = &t.model.stages[0];
    let c = st.channels;
    let (fh, fw) = (h / t.model.patch_embed.stride, w / t.model.patch_embed.stride);
    let input = Shape::new(1, c, fh, fw);
    let xs = Tensor::<f32>::from_fn(input, |i| ((i % 97) as f32) * 0.01);
    println!();
    println!("span-13 kernels on 1x{c}x{fh}x{fw}");
    println!("{:<36} {:>10} {:>14} {:>12}", "kernel", "params", "FLOPs", "median_ms");
    let rows = [
        ("dense 13x13", ConvSpec::dense(c, c, 13)),
        ("depthwise 13x13", ConvSpec::depthwise(c, 13, 1, 6)),
        ("depthwise 7x7 dilation 2", ConvSpec::depthwise(c, 7, 2, 6)),
    ];
    let mut rng = SplitMix64::new(cfg.seed);
    for (name, spec) in rows {
        let conv = Conv2d::<f32>::new(spec, false, &mut rng)?;
        let fl = 2 * spec.macs(input)?;
        let ms = median_ms(repeats, || {
            conv2d_forward(&xs, &conv.weight.value, None, &spec)?;
            Ok(())
        })?;
        println!(
            "{:<36} {:>10} {:>14} {:>12.3}",
            name,
            spec.weight_shape().numel(),
            fl,
            ms
        );
    }
    Ok(u8::from(counted != flops))
}

fn train_cmd(cfg: &RunConfig) -> Result<u8> {
    let t = &cfg.train;
    println!(
        "training {} seed {} for {} epochs ({} steps/epoch)",
        t.model.variant,
        cfg.seed,
        t.epochs,
        t.steps_per_epoch()
    );
    let out = train::train_with(t, t.model.variant, cfg.seed, &mut |m| {
        println!("epoch {:>3}  val_loss {:.6}  ap {:.6}", m.epoch, m.loss, m.ap);
    })?;
    let metrics = cfg.out.join("metrics.csv");
    write_file(&metrics, artifacts::metrics_csv(&out.history))?;
    let weights = cfg.weights_path();
    format::save_weights(&weights, &out.model)?;
    println!("final ap {:.6}", out.final_ap());
    println!("wrote {} and {}", metrics.display(), weights.display());
    Ok(0)
}

fn slug(v: Variant) -> String {
    v.name().to_ascii_lowercase().replace('+', "_")
}

fn ablate(cfg: &RunConfig) -> Result<u8> {
    let dir = cfg.out.join("ablation");
    let mut io_err = None;
    let report = ablation_run(&cfg.train, &cfg.seeds, &mut |v, seed, out| {
        println!("{:<12} seed {:<4} final ap {:.6}", v.name(), seed, out.final_ap());
        let path = dir.join(format!("{}_seed{seed}.csv", slug(v)));
        if let Err(e) = write_file(&path, artifacts::metrics_csv(&out.history)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let path = cfg.out.join("ablation.csv");
    write_file(&path, artifacts::ablation_csv(&report))?;
    println!("{}", describe(&report));
    println!(
        "ordering Base+SA+CA > Base+SA > Base, Base+CA > Base: {}",
        if report.ordering_holds(0.0) {
            "holds"
        } else {
            "does not hold"
        }
    );
    println!("wrote {}", path.display());
    Ok(0)
}

/// ERF of the requested module, built from the first stage's settings.
pub fn erf_map(cfg: &RunConfig, module: ErfModule) -> Result<ErfMap> {
    let st = &cfg.train.model.stages[0];
    let mut rng = SplitMix64::new(cfg.seed);
    let c = st.channels;
    let shape = Shape::new(1, c, cfg.erf_size, cfg.erf_size);
    let map = match module {
        ErfModule::Conv3 => {
            let mut conv = Conv2d::<f64>::new(ConvSpec::dense(c, c, 3), true, &mut rng)?;
            erf_estimate(&mut conv, shape, cfg.erf_samples, cfg.seed)?
        }
        ErfModule::Block | ErfModule::Sa => {
            let mut bc = MksBlockConfig::new(c, st.branches, st.max_size, st.reduction);
            bc.channel_attention = module == ErfModule::Block;
            let mut block = MksBlock::<f64>::new(bc, &mut rng)?;
            erf_estimate(&mut block, shape, cfg.erf_samples, cfg.seed)?
        }
    };
    Ok(map)
}

fn erf(cfg: &RunConfig, module: ErfModule) -> Result<u8> {
    let map = erf_map(cfg, module)?;
    let (sh, sw) = map.support();
    println!(
        "{module:?} erf on {size}x{size}: support {sh}x{sw} (width {}), 95% mass radius {:.4}",
        map.support_width(),
        map.radius95(),
        size = cfg.erf_size
    );
    let pgm = cfg.out.join("erf.pgm");
    let csv = cfg.out.join("erf.csv");
    write_file(&pgm, artifacts::erf_pgm(&map))?;
    write_file(&csv, artifacts::erf_csv(&map))?;
    println!("wrote {} and {}", pgm.display(), csv.display());
    Ok(0)
}

fn eval_ap(file: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let fx = artifacts::parse_ap_fixture(&text)?;
    let ap = class_ap(0, &fx.predictions, fx.positives)?;
    println!("{:.6}", ap.ap);
    Ok(0)
}

fn export(cfg: &mut RunConfig, what: Export) -> Result<u8> {
    match what {
        Export::Weights { path, from, variant } => {
            if let Some(v) = variant {
                cfg.train.model.variant = parse_variant(&v)?;
            }
            cfg.validate()?;
            let mut model = Model::<f32>::seeded(cfg.train.model.clone(), cfg.seed)?;
            model.backbone.set_residual_scales(cfg.train.residual_init as f32);
            if let Some(src) = from {
                format::load_model(&mut model, format::load_weights(&src)?)?;
            }
            format::save_weights(&path, &model)?;
            println!(
                "wrote {} ({} tensors, {} learnable parameters)",
                path.display(),
                model.params().len(),
                model.num_params()
            );
        }
        Export::Tensor { path, index, target } => {
            let s = gen_sample(cfg.seed, index, &cfg.train.data())?;
            let t = if target { s.target } else { s.image };
            println!("wrote {} ({})", path.display(), t.shape());
            format::save_tensor(&path, &AnyTensor::F32(t))?;
        }
    }
    Ok(0)
}

fn import(cfg: &RunConfig, path: &Path, write: Option<&Path>) -> Result<u8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(format::WEIGHTS_MAGIC) {
        let entries = format::read_weights(&mut bytes.as_slice())?;
        let n = entries.len();
        let mut model = Model::<f32>::seeded(cfg.train.model.clone(), cfg.seed)?;
        format::load_model(&mut model, entries)?;
        println!(
            "weight file {}: {n} tensors, {} learnable parameters, loaded into {}",
            path.display(),
            model.num_params(),
            cfg.train.model.variant
        );
        if let Some(dst) = write {
            format::save_weights(dst, &model)?;
            println!("wrote {}", dst.display());
        }
    } else {
        let t = format::read_tensor(&mut bytes.as_slice())?;
        println!("tensor dump {}: {:?} {}", path.display(), t.dtype(), t.shape());
        if let Some(dst) = write {
            format::save_tensor(dst, &t)?;
            println!("wrote {}", dst.display());
        }
    }
    Ok(0)
}
