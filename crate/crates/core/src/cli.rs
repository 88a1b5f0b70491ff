//! Command-line interface: `register`, `apply`, `similarity`, `synth`, `eval`.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::affine::AffineParams;
use crate::document::{AffineDocument, Metadata};
use crate::error::{Error, Result};
use crate::eval::dice;
use crate::nifti::{read_nifti, write_nifti, Datatype};
use crate::optimizer::{multiscale_iso, Method, MetricFamily, OptimizerConfig, ScaleSchedule};
use crate::similarity::{
    correlation_ratio, discrete_cr_oracle, mutual_information, MaskPolicy, ParzenConfig, PatchConfig,
};
use crate::synth::{make_phantom_pair, random_affine, transform_seed, PhantomSpec, TransformRanges};
use crate::volume::{normalize_intensity, NormalizationPolicy, Volume};
use crate::warp::{warp, Interpolation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_OVERLAP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crreg", version, about = "Multi-modal 3D affine registration")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the affine transform aligning MOVING to FIXED.
    Register(RegisterArgs),
    /// Resample a volume through an affine document.
    Apply(ApplyArgs),
    /// Print a similarity value between two volumes.
    Similarity(SimilarityArgs),
    /// Generate a synthetic phantom pair and a randomly moved copy.
    Synth(SynthArgs),
    /// Per-label Dice between two label volumes.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cr,
    Mi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimilarityMetric {
    Cr,
    CrDiscrete,
    Mi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Normalize {
    Percentile,
    Minmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    ValidOnly,
    UseAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long, value_enum, default_value = "cr")]
    pub metric: MetricArg,
    #[arg(long)]
    pub out_affine: PathBuf,
    #[arg(long)]
    pub out_warped: Option<PathBuf>,
    /// Affine document to start from instead of the identity.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "16,8,4,2,1")]
    pub scales: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "100,100,120,140,160")]
    pub iters: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.5)]
    pub bandwidth_ratio: f64,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Base learning rate, or one rate per scale.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub lr: Vec<f64>,
    /// Use a single base rate unchanged at coarse scales.
    #[arg(long)]
    pub no_lr_damping: bool,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    /// CSV of per-iteration losses.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "percentile")]
    pub normalize: Normalize,
    #[arg(long, value_enum, default_value = "valid-only")]
    pub mask_policy: MaskArg,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub affine: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "trilinear")]
    pub interp: InterpArg,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long, value_enum, default_value = "cr")]
    pub metric: SimilarityMetric,
    /// Warp MOVING through this document first.
    #[arg(long)]
    pub affine: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.5)]
    pub bandwidth_ratio: f64,
    #[arg(long, value_enum, default_value = "percentile")]
    pub normalize: Normalize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "64,64,64")]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// ROT_DEG,TRANS_FRAC,SCALE_LO,SCALE_HI,SHEAR
    #[arg(long, value_delimiter = ',')]
    pub ranges: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub labels_a: PathBuf,
    #[arg(long)]
    pub labels_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an engine error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NoOverlap { .. } | Error::NoAdmissiblePatches { .. } => EXIT_NO_OVERLAP,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli.command))),
        None => dispatch(&cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Register(a) => register(a),
        Command::Apply(a) => apply(a),
        Command::Similarity(a) => similarity(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
    }
}

fn normalized(v: &Volume, mode: Normalize) -> Result<Volume> {
    let policy = match mode {
        Normalize::None => return Ok(v.clone()),
        Normalize::Percentile => NormalizationPolicy::default(),
        Normalize::Minmax => NormalizationPolicy::minmax(),
    };
    let n = normalize_intensity(v, &policy)?;
    if n.degenerate {
        log::warn!("intensity range is degenerate; volume normalized to zeros");
    }
    Ok(n.volume)
}

fn parzen(bins: usize, bandwidth_ratio: f64, mask: MaskArg) -> Result<ParzenConfig> {
    let mut cfg = ParzenConfig::new(bins, bandwidth_ratio)?;
    cfg.mask_policy = match mask {
        MaskArg::ValidOnly => MaskPolicy::ValidOnly,
        MaskArg::UseAll => MaskPolicy::UseAll,
    };
    Ok(cfg)
}

fn register(a: &RegisterArgs) -> Result<()> {
    let moving_raw = read_nifti(&a.moving)?;
    let fixed_raw = read_nifti(&a.fixed)?;
    let moving = normalized(&moving_raw, a.normalize)?;
    let fixed = normalized(&fixed_raw, a.normalize)?;
    let family = match a.metric {
        MetricArg::Cr => MetricFamily::Cr,
        MetricArg::Mi => MetricFamily::Mi,
    };
    let sched = ScaleSchedule::for_family(a.scales.clone(), a.iters.clone(), family)?;
    let cfg = parzen(a.bins, a.bandwidth_ratio, a.mask_policy)?;
    let patch = PatchConfig {
        patch_size: a.patch,
        ..PatchConfig::default()
    };
    let opt = OptimizerConfig {
        method: match a.optimizer {
            OptimizerArg::Adam => Method::Adam,
            OptimizerArg::Sgd => Method::Sgd,
        },
        lr: a.lr.clone(),
        damp_coarse: !a.no_lr_damping,
        ..OptimizerConfig::default()
    };
    if opt.lr.len() > 1 && opt.lr.len() != sched.len() {
        return Err(Error::invalid(format!(
            "--lr has {} values for {} scales",
            opt.lr.len(),
            sched.len()
        )));
    }
    let init = match &a.init {
        Some(p) => AffineDocument::load(p)?.params(),
        None => AffineParams::identity(),
    };
    let result = multiscale_iso(&moving, &fixed, &init, &sched, &cfg, &patch, &opt)?;
    let metric = match a.metric {
        MetricArg::Cr => "cr",
        MetricArg::Mi => "mi",
    };
    let meta = Metadata::new(metric, a.scales.clone(), a.iters.clone());
    AffineDocument::new(&result.params, &fixed_raw, &moving_raw, meta)?.save(&a.out_affine)?;
    if let Some(path) = &a.trace {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        result.write_trace_csv(BufWriter::new(f))?;
    }
    if let Some(path) = &a.out_warped {
        let w = warp(&moving_raw, &fixed_raw, &result.params, Interpolation::Trilinear)?;
        write_nifti(&w.image, path, Datatype::F32)?;
    }
    Ok(())
}

fn apply(a: &ApplyArgs) -> Result<()> {
    let doc = AffineDocument::load(&a.affine)?;
    let moving = read_nifti(&a.moving)?;
    let fixed = read_nifti(&a.fixed)?;
    let (interp, dtype) = match a.interp {
        InterpArg::Trilinear => (Interpolation::Trilinear, Datatype::F32),
        InterpArg::Nearest => {
            let src = moving.header().and_then(Datatype::of_header).unwrap_or(Datatype::F32);
            (Interpolation::Nearest, src)
        }
    };
    let w = warp(&moving, &fixed, &doc.params(), interp)?;
    write_nifti(&w.image, &a.out, dtype)
}

fn similarity(a: &SimilarityArgs) -> Result<()> {
    let moving = normalized(&read_nifti(&a.moving)?, a.normalize)?;
    let fixed = normalized(&read_nifti(&a.fixed)?, a.normalize)?;
    let p = match &a.affine {
        Some(path) => AffineDocument::load(path)?.params(),
        None => AffineParams::identity(),
    };
    let w = warp(&moving, &fixed, &p, Interpolation::Trilinear)?;
    let (x, y): (Vec<f64>, Vec<f64>) = w
        .image
        .data()
        .iter()
        .zip(fixed.data())
        .zip(&w.weight)
        .filter(|(_, &wt)| wt >= 1.0)
        .map(|((&m, &f), _)| (m, f))
        .unzip();
    if (x.len() as f64) < crate::similarity::MIN_VALID_FRACTION * fixed.len() as f64 {
        return Err(Error::NoOverlap {
            valid_fraction: x.len() as f64 / fixed.len() as f64,
        });
    }
    let cfg = ParzenConfig::new(a.bins, a.bandwidth_ratio)?;
    let (name, value) = match a.metric {
        SimilarityMetric::Cr => ("cr", correlation_ratio(&x, &y, &cfg)?),
        SimilarityMetric::CrDiscrete => ("cr-discrete", discrete_cr_oracle(&x, &y, a.bins)?),
        SimilarityMetric::Mi => ("mi", mutual_information(&x, &y, &cfg)?),
    };
    println!("{name}={value:?} n_effective={}", x.len());
    Ok(())
}

fn parse_ranges(v: &[f64]) -> Result<TransformRanges> {
    let [rot, trans, lo, hi, shear] = v else {
        return Err(Error::invalid(format!(
            "--ranges needs ROT_DEG,TRANS_FRAC,SCALE_LO,SCALE_HI,SHEAR, got {} values",
            v.len()
        )));
    };
    let r = TransformRanges {
        max_rot: rot.to_radians(),
        max_trans: *trans,
        scale_range: [*lo, *hi],
        max_shear: *shear,
    };
    r.validate()?;
    Ok(r)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let dims: [usize; 3] = a
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid(format!("--dims needs X,Y,Z, got {:?}", a.dims)))?;
    let ranges = match &a.ranges {
        Some(v) => parse_ranges(v)?,
        None => TransformRanges::default(),
    };
    let phantom = make_phantom_pair(&PhantomSpec::new(dims, a.seed))?;
    let tseed = transform_seed(a.seed);
    let q = random_affine(&ranges, tseed)?;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = |name: &str| dir.join(name);
    write_nifti(&phantom.ct_like, out("ct.nii.gz"), Datatype::F32)?;
    write_nifti(&phantom.labels, out("labels.nii.gz"), Datatype::I16)?;
    write_nifti(&phantom.pet_like, out("pet.nii.gz"), Datatype::F32)?;
    // warp what a reader of pet.nii.gz sees, so `apply` reproduces pet_moved exactly
    let pet = read_nifti(out("pet.nii.gz"))?;
    let labels = read_nifti(out("labels.nii.gz"))?;
    let moved = warp(&pet, &pet, &q, Interpolation::Trilinear)?;
    write_nifti(&moved.image, out("pet_moved.nii.gz"), Datatype::F32)?;
    let labels_moved = warp(&labels, &labels, &q, Interpolation::Nearest)?;
    write_nifti(&labels_moved.image, out("labels_moved.nii.gz"), Datatype::I16)?;
    let mut meta = Metadata::new("truth", Vec::new(), Vec::new());
    meta.seeds.insert("phantom".into(), a.seed);
    meta.seeds.insert("transform".into(), tseed);
    AffineDocument::new(&q, &pet, &pet, meta)?.save(out("truth.affine"))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let la = read_nifti(&a.labels_a)?;
    let lb = read_nifti(&a.labels_b)?;
    let report = dice(&la, &lb, None)?;
    let f = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.write_csv(BufWriter::new(f))?;
    println!("mean_dsc={:?} labels={}", report.mean, report.per_label.len());
    Ok(())
}
