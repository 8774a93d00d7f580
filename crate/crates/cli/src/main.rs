use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use quadshade::config::{AngleLight, ConfigError, LightSpec, RunConfig, VectorLight};
use quadshade::evalkit::{self, EvalError};
use quadshade::io::{self, ContainerHeader, IoError, ProposalContainer};
use quadshade::proposals::{self, ProposalError};
use quadshade::reconstruct::{self, PatchSets, ReconError};
use quadshade::synth::{self, normals_from_depth, SynthError};
use quadshade::{Exec, Grid2};

#[derive(Parser)]
#[command(name = "quadshade", version, about = "Shape from shading with quadratic patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a random surface: image.pfm, depth_true.pfm, mask.pgm, scene.json.
    Synth(SynthArgs),
    /// Per-patch shape proposals for an image under a known light.
    Infer(InferArgs),
    /// Depth map from a proposals container.
    Reconstruct(ReconArgs),
    /// Angular error of an estimated depth map against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    light_elev: Option<f64>,
    #[arg(long)]
    light_az: Option<f64>,
    /// Standard deviation of additive Gaussian intensity noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Beckmann roughness of a specular lobe.
    #[arg(long)]
    beckmann: Option<f64>,
    #[arg(long)]
    specular: Option<f64>,
    #[arg(long)]
    saturation: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    /// Nonzero pixels are usable; everything is usable when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Light vector `x,y,z`.
    #[arg(long, value_delimiter = ',', num_args = 3, conflicts_with_all = ["light_elev", "light_az"])]
    light: Option<Vec<f64>>,
    #[arg(long)]
    light_elev: Option<f64>,
    #[arg(long)]
    light_az: Option<f64>,
    /// Odd patch sizes, e.g. `3,5,9,17`.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// θ samples per patch.
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long)]
    sigma_i: Option<f64>,
    /// 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ReconArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    proposals: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d_phi: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    sigma_factor: Option<f64>,
    #[arg(long)]
    cg_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Restrict to these patch sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    no_dummy: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-pixel errors as `row,col,error_deg`.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Label stored in the report metadata.
    #[arg(long)]
    method: Option<String>,
    /// Also evaluate best-of-N proposal error from this container.
    #[arg(long, requires = "nbest_csv")]
    proposals: Option<PathBuf>,
    #[arg(long, default_value_t = 21)]
    nbest: usize,
    #[arg(long, requires = "proposals")]
    nbest_csv: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Io(String),
    Data(String),
    NonConvergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Data(_) => 4,
            Failure::NonConvergence(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Data(m) | Failure::NonConvergence(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ReconError> for Failure {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::InvalidConfig(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Infer(a) => run_infer(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: Option<&Path>) -> Res<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Res<()> {
    Ok(io::write_file(path, bytes)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Res<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    bytes.push(b'\n');
    write(path, &bytes)
}

fn create_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn set_angles(cfg: &mut RunConfig, elev: Option<f64>, az: Option<f64>) {
    if elev.is_none() && az.is_none() {
        return;
    }
    let mut a = match cfg.light {
        LightSpec::Angles(a) => a,
        LightSpec::Vector(_) => AngleLight {
            elevation_deg: 60.0,
            azimuth_deg: 0.0,
            strength: 1.0,
        },
    };
    if let Some(e) = elev {
        a.elevation_deg = e;
    }
    if let Some(z) = az {
        a.azimuth_deg = z;
    }
    cfg.light = LightSpec::Angles(a);
}

fn run_synth(a: SynthArgs) -> Res<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds.surface = s;
        cfg.seeds.noise = s;
    }
    if let Some(n) = a.size {
        cfg.synth.rows = n;
        cfg.synth.cols = n;
    }
    set_angles(&mut cfg, a.light_elev, a.light_az);
    if let Some(v) = a.noise {
        cfg.synth.noise_sigma = v;
    }
    if let Some(v) = a.beckmann {
        cfg.synth.beckmann_roughness = Some(v);
    }
    if let Some(v) = a.specular {
        cfg.synth.specular_strength = v;
    }
    if let Some(v) = a.saturation {
        cfg.synth.saturation_level = v;
    }
    if let Some(v) = a.amplitude {
        cfg.synth.amplitude = Some(v);
    }
    cfg.paths.out = Some(a.out_dir.clone());
    cfg.validate()?;

    let surface = cfg.surface_spec();
    let z = synth::random_surface(&surface)?;
    let scene = synth::render_scene(&z, &cfg.render_spec()?, cfg.seeds.noise)?;
    let light = cfg.light_vector()?;

    let dir = &a.out_dir;
    create_dir(dir)?;
    io::write_pfm(&dir.join("image.pfm"), &scene.image)?;
    io::write_pfm(&dir.join("depth_true.pfm"), &z)?;
    io::write_mask(&dir.join("mask.pgm"), &scene.mask)?;
    let meta = json!({
        "rows": z.rows(),
        "cols": z.cols(),
        "light": light.to_array(),
        "seeds": cfg.seeds,
        "amplitude": surface.resolved_amplitude(),
        "control_grid": surface.resolved_control(),
        "saturated_pixels": scene.saturated_count(),
        "config_hash": cfg.hash(),
        "config": cfg.result_affecting_json(),
    });
    write_json(&dir.join("scene.json"), &meta)?;
    write_json(&dir.join("config.json"), &cfg.resolved_json())
}

fn proposal_failure(e: ProposalError) -> Failure {
    match e {
        ProposalError::InvalidArgument(_) | ProposalError::ViewAlignedLight => Failure::Config(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run_infer(a: InferArgs) -> Res<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(v) = &a.light {
        cfg.light = LightSpec::Vector(VectorLight {
            vector: [v[0], v[1], v[2]],
        });
    }
    set_angles(&mut cfg, a.light_elev, a.light_az);
    if let Some(s) = a.sizes {
        cfg.patch_sizes = s;
    }
    if let Some(j) = a.j {
        cfg.theta_samples = j;
    }
    if let Some(s) = a.sigma_i {
        cfg.noise.sigma_i = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.paths.image = Some(a.image.clone());
    cfg.paths.mask = a.mask.clone();
    cfg.paths.proposals = Some(a.out.clone());
    cfg.validate()?;
    let light = cfg.light_vector()?;

    let image = io::read_pfm(&a.image)?;
    let mask = match &a.mask {
        Some(p) => io::read_mask(p)?,
        None => Grid2::filled(image.rows(), image.cols(), true),
    };
    if mask.shape() != image.shape() {
        return Err(Failure::Data(format!(
            "mask is {:?} but image is {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    let exec = Exec::with_workers(cfg.workers);
    let dist = proposals::infer_image(
        &image,
        &mask,
        &light,
        &cfg.patch_sizes,
        &cfg.noise,
        cfg.theta_samples,
        &cfg.solver,
        &exec,
    )
    .map_err(proposal_failure)?;
    if dist.patch_count() == 0 {
        return Err(Failure::Data(
            "no patch admits a proposal: image and light are inconsistent (shadowed or masked everywhere)".into(),
        ));
    }
    let header = ContainerHeader {
        generator: format!("quadshade {}", env!("CARGO_PKG_VERSION")),
        config_hash: cfg.hash(),
        config: cfg.result_affecting_json(),
        light: light.to_array(),
        noise: cfg.noise,
        theta_samples: cfg.theta_samples,
        solver: cfg.solver,
    };
    let container = ProposalContainer::new(header, dist);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&a.out, &container.to_json()?)?;
    write_json(&sibling(&a.out, ".config.json"), &cfg.resolved_json())
}

fn run_reconstruct(a: ReconArgs) -> Res<()> {
    let container = ProposalContainer::from_json(&io::read_file(&a.proposals)?)?;
    let mut cfg = match &a.common.config {
        Some(p) => load_config(Some(p))?,
        None => serde_json::from_value(container.header.config.clone())
            .map_err(|e| Failure::Data(format!("container config: {e}")))?,
    };
    let r = &mut cfg.reconstruction;
    if a.lambda.is_some() {
        r.lambda = a.lambda;
    }
    if a.d_phi.is_some() {
        r.d_phi = a.d_phi;
    }
    if let Some(v) = a.sigma0 {
        r.sigma0 = v;
    }
    if let Some(v) = a.sigma_factor {
        r.sigma_factor = v;
    }
    if let Some(v) = a.cg_iters {
        r.cg_iters = v;
    }
    if let Some(v) = a.tol {
        r.convergence_tol = v;
    }
    if let Some(v) = a.max_rounds {
        r.max_rounds = v;
    }
    if a.sizes.is_some() {
        r.patch_sizes = a.sizes;
    }
    if a.no_dummy {
        r.use_dummy = false;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.paths.proposals = Some(a.proposals.clone());
    cfg.paths.out = Some(a.out.clone());
    cfg.validate()?;

    let exec = Exec::with_workers(cfg.workers);
    let dist = &container.proposals;
    let rec = reconstruct::reconstruct(dist, &cfg.reconstruction, &exec)?;

    create_dir(&a.out)?;
    io::write_pfm(&a.out.join("depth.pfm"), &rec.depth.z)?;
    io::write_mask(&a.out.join("depth_mask.pgm"), &rec.depth.valid)?;

    let sets = match &cfg.reconstruction.patch_sizes {
        Some(s) => PatchSets::with_sizes(dist, s),
        None => PatchSets::all(dist),
    };
    let patches: Vec<_> = sets
        .sets
        .iter()
        .zip(&rec.labeling.labels)
        .map(|(s, &l)| {
            json!({
                "origin": [s.origin.0, s.origin.1],
                "size": s.size,
                "label": l,
                "dummy": l == s.len(),
            })
        })
        .collect();
    write_json(&a.out.join("labels.json"), &json!({ "patches": patches }))?;

    let rep = &rec.report;
    let converged = rep.cg_non_convergence == 0 && rep.unconverged_stages.is_empty();
    let report = json!({
        "converged": converged,
        "lambda": rep.lambda,
        "d_phi": rep.d_phi,
        "proposals_config_hash": container.header.config_hash,
        "config_hash": cfg.hash(),
        "reconstruction": rep,
    });
    write_json(&a.out.join("report.json"), &report)?;
    write_json(&a.out.join("config.json"), &cfg.resolved_json())?;
    if !converged {
        return Err(Failure::NonConvergence(format!(
            "outputs written, but {} CG solve(s) made no progress and stages {:?} hit max_rounds",
            rep.cg_non_convergence, rep.unconverged_stages
        )));
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Res<()> {
    let cfg = load_config(a.common.config.as_deref())?;
    let est = io::read_pfm(&a.est)?;
    let truth = io::read_pfm(&a.truth)?;
    let mask = a.mask.as_deref().map(io::read_mask).transpose()?;
    let mut report = evalkit::surface_report(&est, &truth, mask.as_ref())?;
    let method = a
        .method
        .unwrap_or_else(|| a.est.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    report.metadata.insert("scene".into(), json!(a.truth.display().to_string()));
    report.metadata.insert("method".into(), json!(method));
    report.metadata.insert("config_hash".into(), json!(cfg.hash()));

    if let (Some(p), Some(csv_path)) = (&a.proposals, &a.nbest_csv) {
        let container = ProposalContainer::from_json(&io::read_file(p)?)?;
        let normals = normals_from_depth(&truth);
        let curve = evalkit::n_best_curve(container.proposals.iter_sets(), &normals, mask.as_ref(), a.nbest)?;
        write(csv_path, evalkit::n_best_csv(&curve).as_bytes())?;
        report.metadata.insert("nbest_median".into(), json!(curve.per_n.iter().map(|q| q.q50).collect::<Vec<_>>()));
    }

    if let Some(csv_path) = &a.csv {
        let mut s = String::from("row,col,error_deg\n");
        for (k, e) in report.errors.iter().enumerate() {
            if let Some(e) = e {
                s.push_str(&format!("{},{},{}\n", k / report.cols, k % report.cols, e));
            }
        }
        write(csv_path, s.as_bytes())?;
    }
    write_json(&a.out, &report)
}
