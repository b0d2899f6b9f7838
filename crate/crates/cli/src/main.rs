mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use isospec_core::assembly::{assemble_base, conformal_operators, OperatorPair};
use isospec_core::checks::{run_all, Size};
use isospec_core::eigen::{self, solve, SpectralData};
use isospec_core::isospec::{
    convexity_probe, default_field_basis, metric_side_probe, obstruction_map, random_smooth_field,
    weyl_volume_estimate,
};
use isospec_core::perturb::{corrections, PerturbSettings};
use isospec_core::surface::{
    field_from_expression, load_mesh, make_torus, ConformalPerturbation, DiscreteSurface,
    ScalarField, Side, SurfaceKind,
};
use isospec_core::tracking::{largest_valid_t, predicted, track};

use config::{Config, Experiment, FieldSpec, SideSpec, SurfaceSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "isospec",
    version,
    about = "Perturbation experiments on conformally perturbed surface Laplacians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Corrupt every eigensolver result (test fixture).
    #[arg(long, global = true, hide = true)]
    inject_fault: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Lowest eigenpairs of the unperturbed Laplacian.
    Spectrum(RunArgs),
    /// First- and second-order eigenvalue corrections.
    Corrections(RunArgs),
    /// Singular values and kernel of the matrix-element map.
    Obstruction(RunArgs),
    /// Spectra along a straight line of inverse metrics.
    Convexity(RunArgs),
    /// Second-order identity for a metric-side perturbation.
    MetricProbe(RunArgs),
    /// Area estimate from the eigenvalue counting function.
    Weyl(RunArgs),
    /// Bundled acceptance checks at reduced size.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of modes (overrides `solver.n_modes`).
    #[arg(long)]
    modes: Option<usize>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

/// A failed run, classified by exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical {
        message: String,
        node: Option<usize>,
    },
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(format!("{e:#}"))
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Numerical { .. } => EXIT_NUMERICAL,
        }
    }

    fn record(&self) -> serde_json::Value {
        let (kind, message, node) = match self {
            Self::Config(m) => ("config", m, None),
            Self::Numerical { message, node } => ("numerical", message, *node),
        };
        let mut v = json!({
            "schema_version": 1,
            "error": { "kind": kind, "message": message, "exit_code": self.exit_code() }
        });
        if let Some(node) = node {
            v["error"]["node"] = node.into();
        }
        v
    }
}

impl From<isospec_core::Error> for Failure {
    fn from(e: isospec_core::Error) -> Self {
        use isospec_core::Error as E;
        match e {
            E::DimensionTooSmall { .. }
            | E::InvalidArgument(_)
            | E::Parse { .. }
            | E::Topology(_)
            | E::UnsupportedExpression(_)
            | E::FieldLength { .. }
            | E::DegenerateTriangle { .. }
            | E::InsufficientModes { .. }
            | E::Io(_) => Self::Config(e.to_string()),
            E::PositivityViolation { node, .. } => Self::Numerical {
                message: e.to_string(),
                node: Some(node),
            },
            _ => Self::Numerical {
                message: e.to_string(),
                node: None,
            },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Config(format!("cannot write output: {e}"))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISOSPEC_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.inject_fault {
        eigen::set_fault_injection(true);
    }
    let (experiment, args) = match cli.command {
        Command::Selftest => return selftest(),
        Command::Spectrum(a) => (Experiment::Spectrum, a),
        Command::Corrections(a) => (Experiment::Corrections, a),
        Command::Obstruction(a) => (Experiment::Obstruction, a),
        Command::Convexity(a) => (Experiment::Convexity, a),
        Command::MetricProbe(a) => (Experiment::MetricProbe, a),
        Command::Weyl(a) => (Experiment::Weyl, a),
    };
    let mut out_dir = None;
    match run(experiment, &args, &mut out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let record = failure.record();
            eprintln!("{record}");
            if let Some(dir) = out_dir.filter(|d: &PathBuf| d.is_dir()) {
                let _ = std::fs::write(
                    dir.join("error.json"),
                    serde_json::to_string_pretty(&record).expect("json") + "\n",
                );
            }
            ExitCode::from(failure.exit_code())
        }
    }
}

fn selftest() -> ExitCode {
    let results = run_all(Size::Reduced);
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(stdout, "{}", r.line_untimed());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(
        stdout,
        "{} of {} checks passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERICAL)
    }
}

fn effective_config(experiment: Experiment, args: &RunArgs) -> Outcome<Config> {
    let mut config = match &args.config {
        Some(path) => Config::load(path).map_err(Failure::config)?,
        None => serde_json::from_str("{}").expect("defaults"),
    };
    if config.experiment.is_some_and(|e| e != experiment) {
        config.validate(experiment).map_err(Failure::config)?;
    }
    config.experiment = Some(experiment);
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    if let Some(modes) = args.modes {
        config.solver.n_modes = modes;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate(experiment).map_err(Failure::config)?;
    Ok(config)
}

fn run(experiment: Experiment, args: &RunArgs, out_dir: &mut Option<PathBuf>) -> Outcome<()> {
    let start = Instant::now();
    let config = effective_config(experiment, args)?;
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    *out_dir = Some(dir.clone());
    info!("running {} into {}", experiment.name(), dir.display());

    let surface = build_surface(&config.surface)?;
    if config.solver.n_modes > surface.node_count() {
        return Err(Failure::Config(format!(
            "solver.n_modes = {} exceeds the {} nodes of the surface",
            config.solver.n_modes,
            surface.node_count()
        )));
    }
    let mut out = Output::new(&dir);
    match experiment {
        Experiment::Spectrum => spectrum(&config, &surface, &mut out)?,
        Experiment::Corrections => run_corrections(&config, &surface, &mut out)?,
        Experiment::Obstruction => obstruction(&config, &surface, &mut out)?,
        Experiment::Convexity => convexity(&config, &surface, &mut out)?,
        Experiment::MetricProbe => metric_probe(&config, &surface, &mut out)?,
        Experiment::Weyl => weyl(&config, &surface, &mut out)?,
    }
    let manifest = json!({
        "schema_version": 1,
        "experiment": experiment.name(),
        "versions": {
            "isospec-cli": env!("CARGO_PKG_VERSION"),
            "isospec-core": isospec_core::VERSION,
        },
        "config": config,
        "seed": config.seed,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "artifacts": out.written,
    });
    out.json("manifest.json", &manifest)?;
    Ok(())
}

/// Writes artifacts into the output directory and records their names.
struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn create(&mut self, name: &str) -> Outcome<BufWriter<File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Outcome<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Outcome<()> {
        let mut w = self.create(name)?;
        write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn build_surface(spec: &SurfaceSpec) -> Outcome<DiscreteSurface> {
    Ok(match spec {
        SurfaceSpec::Torus { nx, ny, lx, ly } => make_torus(*nx, *ny, *lx, *ly)?,
        SurfaceSpec::Mesh { path } => load_mesh(path)?,
    })
}

fn build_field(surface: &DiscreteSurface, spec: &FieldSpec, seed: u64) -> Outcome<ScalarField> {
    Ok(match spec {
        FieldSpec::Expression(src) => field_from_expression(surface, src)?,
        FieldSpec::Random { random } => {
            let r = random_smooth_field(surface, random.seed.unwrap_or(seed))?;
            ScalarField::constant(surface, random.offset)?.combine(1.0, &r, random.amplitude)?
        }
    })
}

fn perturbation(config: &Config, surface: &DiscreteSurface) -> Outcome<ConformalPerturbation> {
    let p = &config.perturbation;
    let f1 = build_field(surface, &p.f1, config.seed)?;
    let f2 =
        p.f2.as_ref()
            .map(|f| build_field(surface, f, config.seed))
            .transpose()?;
    let side = match p.side {
        SideSpec::InverseMetric => Side::InverseMetric,
        SideSpec::Metric => Side::Metric,
    };
    Ok(ConformalPerturbation::new(side, f1, f2)?)
}

fn surface_record(surface: &DiscreteSurface) -> serde_json::Value {
    json!({
        "kind": match surface.kind() {
            SurfaceKind::TorusGrid => "torus",
            SurfaceKind::TriangleMesh => "mesh",
        },
        "node_count": surface.node_count(),
        "area": surface.area(),
    })
}

fn solve_modes(config: &Config, pair: &OperatorPair, n_modes: usize) -> Outcome<SpectralData> {
    Ok(solve(pair, n_modes, config.solver.tol_deg)?)
}

fn spectrum(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let pair = assemble_base(surface)?;
    let spec = solve_modes(config, &pair, config.solver.n_modes)?;
    out.csv("spectrum.csv", |w| spec.write_csv(w))?;
    let groups: Vec<[usize; 2]> = spec
        .degeneracy_groups()
        .iter()
        .map(|g| [g.start, g.end])
        .collect();
    out.json(
        "spectrum.json",
        &json!({
            "schema_version": 1,
            "surface": surface_record(surface),
            "tol_deg": spec.tol_deg(),
            "eigenvalues": spec.eigenvalues(),
            "degeneracy_groups": groups,
        }),
    )
}

fn run_corrections(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let pair = assemble_base(surface)?;
    let n_modes = config.solver.n_modes;
    let basis_modes = config
        .solver
        .truncation_modes
        .unwrap_or(surface.node_count())
        .clamp(n_modes, surface.node_count());
    let spec = solve_modes(config, &pair, basis_modes)?;
    let pert = perturbation(config, surface)?;
    let ops = conformal_operators(&pair, &pert)?;
    let settings = PerturbSettings {
        truncation_modes: config.solver.truncation_modes,
    };
    let report = corrections(&spec, &ops, &settings)?;
    let valid_t = largest_valid_t(
        &pair,
        &pert,
        &report,
        0..n_modes,
        &config.sweep.t_grid,
        config.sweep.t_tolerance,
    )?;
    let mut v = report.to_json();
    if let Some(modes) = v["modes"].as_array_mut() {
        modes.truncate(n_modes);
    }
    v["surface"] = surface_record(surface);
    v["valid_t"] = json!({
        "t_grid": config.sweep.t_grid,
        "relative_tolerance": config.sweep.t_tolerance,
        "largest_valid_t": valid_t,
    });
    out.json("corrections.json", &v)?;

    let mut rows = Vec::new();
    for &t in &config.sweep.t_grid {
        let exact = track(&pair, &pert, &report, t, n_modes)?;
        for (n, e) in exact.iter().enumerate() {
            rows.push((t, n, *e, e - predicted(&report, n, t)));
        }
    }
    out.csv("corrections.csv", |w| {
        writeln!(w, "# schema_version: 1")?;
        writeln!(w, "tau_or_t,mode,eigenvalue,deviation")?;
        for (t, n, e, d) in rows {
            writeln!(w, "{t:?},{n},{e:?},{d:?}")?;
        }
        Ok(())
    })
}

fn obstruction(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let o = &config.obstruction;
    if surface.kind() == SurfaceKind::TorusGrid && o.basis_dim > 9 {
        return Err(Failure::Config(format!(
            "obstruction.basis_dim is at most 9 on a torus, got {}",
            o.basis_dim
        )));
    }
    let pair = assemble_base(surface)?;
    let n_modes = config.solver.n_modes;
    let solved = n_modes.max(o.basis_dim).min(surface.node_count());
    let spec = solve_modes(config, &pair, solved)?;
    let basis = default_field_basis(surface, &spec, o.basis_dim)?;
    let mut kernel_dims = Vec::with_capacity(n_modes);
    let mut last = None;
    for n in 1..=n_modes {
        let r = obstruction_map(&spec, &basis, n, o.kernel_tol)?;
        kernel_dims.push(r.kernel_dim);
        last = Some(r);
    }
    let last = last.expect("n_modes >= 1");
    let mut v = serde_json::to_value(&last).expect("serializable");
    v["schema_version"] = 1.into();
    v["conditioning"] = last.conditioning().into();
    v["kernel_dims_by_n_modes"] = json!(kernel_dims);
    v["surface"] = surface_record(surface);
    out.json("obstruction.json", &v)
}

fn convexity(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let c1 = build_field(surface, &config.convexity.c1, config.seed)?;
    let c2 = build_field(surface, &config.convexity.c2, config.seed.wrapping_add(1))?;
    let report = convexity_probe(
        surface,
        &c1,
        &c2,
        config.solver.n_modes,
        &config.sweep.tau_grid,
    )?;
    out.json("convexity.json", &report.to_json())?;
    out.csv("convexity.csv", |w| report.write_csv(w))
}

fn metric_probe(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let f = build_field(surface, &config.perturbation.f1, config.seed)?;
    let report = metric_side_probe(surface, &f, config.solver.n_modes, &config.sweep.t_grid)?;
    out.json("metric_probe.json", &report.to_json())?;
    out.csv("metric_probe.csv", |w| report.write_csv(w))
}

fn weyl(config: &Config, surface: &DiscreteSurface, out: &mut Output) -> Outcome<()> {
    let pair = assemble_base(surface)?;
    let spec = solve_modes(config, &pair, config.solver.n_modes)?;
    let area = weyl_volume_estimate(&spec)?;
    let true_area = surface.area();
    out.json(
        "weyl.json",
        &json!({
            "schema_version": 1,
            "surface": surface_record(surface),
            "n_modes": spec.n_modes(),
            "fitted_area": area,
            "true_area": true_area,
            "relative_error": (area - true_area).abs() / true_area,
        }),
    )
}
