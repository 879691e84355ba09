//! `lamlab`: batch front end for the decomposition pipeline.
//!
//! Exit codes: 0 success, 2 verification failure, 3 non-convergence,
//! 4 I/O or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use lamlab_core::convexity::{jensen_gap_atoms, FunctionClass, TestFunction};
use lamlab_core::fixedpoint::{FixedPointConfig, Outcome};
use lamlab_core::geometry::{build_unit_cube_triangulation, validate, Triangulation};
use lamlab_core::hn::{same_measure, validate_certificate, HnCertificate, HnTree, RankOne};
use lamlab_core::pipeline::{build_instance, decompose, oracle_compare, InstanceKind};
use lamlab_core::pwa::{check_jump_compatibility, GradientMeasure, PeriodicPwaMap};
use lamlab_core::scalar::{Rational, Scalar};
use lamlab_core::serialization::{read_bundle, write_bundle, ArtifactBundle};
use lamlab_core::theta::select_tuples;
use log::info;
use rayon::prelude::*;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "lamlab", version, about = "Laminate decompositions of two-component periodic gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Space dimension N.
    #[arg(long, global = true, default_value_t = 2)]
    n: usize,
    /// Mesh refinement level r (grid spacing 2^-r).
    #[arg(long, global = true, default_value_t = 0)]
    refine: u32,
    /// Tree depth m, or "auto" for the minimal admissible depth.
    #[arg(long, global = true, default_value = "auto")]
    depth: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Rational arithmetic end to end.
    #[arg(long, global = true)]
    exact: bool,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true)]
    max_restarts: Option<usize>,
    #[arg(long, global = true)]
    max_depth_escalations: Option<usize>,
    #[arg(long, global = true)]
    tol_parallel: Option<f64>,
    /// Bundle to write (.lamlab.json).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Bundle to read instead of generating an instance.
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// random | identical | scaled | zero | separable
    #[arg(long, global = true, default_value = "random")]
    instance: String,
    /// Nodal values are drawn from [-amplitude, amplitude].
    #[arg(long, global = true, default_value_t = 3)]
    amplitude: i64,
    /// Number of instances for oracle-compare.
    #[arg(long, global = true, default_value_t = 20)]
    count: usize,
    /// Comma-separated test functions for jensen.
    #[arg(long, global = true, default_value = "det,frobenius,polyconvex")]
    functions: String,
    /// JSON parameters applied to every function in --functions.
    #[arg(long, global = true)]
    params: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build and validate the periodic Kuhn triangulation.
    Triangulate,
    /// Generate a seeded two-component map.
    SampleMap,
    /// Gradient measure with barycenter and jump checks.
    Extract,
    /// Tuple selection and leaf weights.
    Select,
    /// Full pipeline: extract, select, fixed point, joint laminate check.
    Decompose,
    /// Re-validate the certificate stored in a bundle.
    Verify,
    /// Jensen gaps of test functions.
    Jensen,
    /// Pipeline against brute-force search on seeded instances.
    OracleCompare,
    /// Summary of a bundle.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Table,
}

enum Failure {
    Config(String),
    Verification(String),
    NonConvergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 2,
            Failure::NonConvergence(_) => 3,
            Failure::Config(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Verification(_) => "verification",
            Failure::NonConvergence(_) => "non-convergence",
            Failure::Config(_) => "io-or-config",
        }
    }

    fn reason(&self) -> &str {
        match self {
            Failure::Config(s) | Failure::Verification(s) | Failure::NonConvergence(s) => s,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

/// Report plus optional bundle; `failure` still emits the report.
struct Output {
    report: Value,
    bundle: Option<ArtifactBundle>,
    failure: Option<Failure>,
}

impl Output {
    fn ok(report: Value, bundle: Option<ArtifactBundle>) -> Self {
        Self { report, bundle, failure: None }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LAMLAB_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = execute(&cli);
    let (mut report, bundle, failure) = match result {
        Ok(o) => (o.report, o.bundle, o.failure),
        Err(f) => (json!({}), None, Some(f)),
    };
    let mut failure = failure;
    if let (Some(path), Some(b)) = (&cli.out, &bundle) {
        if let Err(e) = write_bundle(b, path) {
            failure = Some(config_err(e));
        } else if let Value::Object(m) = &mut report {
            m.insert("bundle".into(), json!(path.display().to_string()));
        }
    }
    if let Value::Object(m) = &mut report {
        m.insert("command".into(), json!(command_name(cli.command)));
        m.insert("status".into(), json!(if failure.is_some() { "error" } else { "ok" }));
        if let Some(f) = &failure {
            m.insert("error".into(), json!({"kind": f.kind(), "reason": f.reason()}));
        }
    }
    print_report(&report, cli.format);
    match failure {
        None => ExitCode::SUCCESS,
        Some(f) => {
            eprintln!("lamlab: {}", f.reason());
            ExitCode::from(f.code())
        }
    }
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Triangulate => "triangulate",
        Command::SampleMap => "sample-map",
        Command::Extract => "extract",
        Command::Select => "select",
        Command::Decompose => "decompose",
        Command::Verify => "verify",
        Command::Jensen => "jensen",
        Command::OracleCompare => "oracle-compare",
        Command::Report => "report",
    }
}

fn print_report(report: &Value, format: Format) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(report).expect("values serialize")),
        Format::Table => {
            if let Value::Object(m) = report {
                let width = m.keys().map(String::len).max().unwrap_or(0);
                for (k, v) in m {
                    let text = match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    println!("{k:width$}  {text}");
                }
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<Output, Failure> {
    let input = match &cli.input {
        Some(p) => Some(read_bundle(p).map_err(config_err)?),
        None => None,
    };
    if matches!(cli.command, Command::Report) {
        return report(input.ok_or_else(|| config_err("report needs --in"))?);
    }
    let exact = cli.exact
        || input
            .as_ref()
            .and_then(|b| b.config.get("exact"))
            .and_then(Value::as_str)
            .is_some_and(|s| s == "true");
    if exact {
        Run::<Rational>::new(cli, input, true)?.dispatch()
    } else {
        Run::<f64>::new(cli, input, false)?.dispatch()
    }
}

struct Run<'a, S> {
    cli: &'a Cli,
    input: Option<ArtifactBundle>,
    exact: bool,
    cfg: FixedPointConfig,
    depth: Option<usize>,
    kind: InstanceKind,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar + Send + Sync> Run<'a, S> {
    fn new(cli: &'a Cli, input: Option<ArtifactBundle>, exact: bool) -> Result<Self, Failure> {
        let mut cfg = FixedPointConfig { seed: cli.seed, ..Default::default() };
        let positive = |v: Option<usize>, name: &str| match v {
            Some(0) => Err(config_err(format!("--{name} must be positive"))),
            other => Ok(other),
        };
        if let Some(v) = positive(cli.max_iter, "max-iter")? {
            cfg.max_iter = v;
        }
        if let Some(v) = cli.max_restarts {
            cfg.max_restarts = v;
        }
        if let Some(v) = cli.max_depth_escalations {
            cfg.max_depth_escalations = v;
        }
        if let Some(v) = cli.tol_parallel {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err("--tol-parallel must be positive"));
            }
            cfg.tol_parallel = v;
        }
        let depth = match cli.depth.as_str() {
            "auto" => None,
            d => Some(d.parse().map_err(|_| config_err(format!("bad --depth `{d}`")))?),
        };
        if !(2..=3).contains(&cli.n) {
            return Err(config_err("--n must be 2 or 3"));
        }
        let kind = cli.instance.parse().map_err(config_err)?;
        Ok(Self { cli, input, exact, cfg, depth, kind, _marker: std::marker::PhantomData })
    }

    fn config_snapshot(&self) -> Value {
        let opt = |v: Option<usize>| v.map_or(Value::Null, |x| json!(x.to_string()));
        json!({
            "amplitude": self.cli.amplitude.to_string(),
            "depth": self.cli.depth,
            "exact": self.exact.to_string(),
            "instance": self.kind.name(),
            "max_depth_escalations": self.cfg.max_depth_escalations.to_string(),
            "max_iter": self.cfg.max_iter.to_string(),
            "max_restarts": self.cfg.max_restarts.to_string(),
            "max_iter_flag": opt(self.cli.max_iter),
            "n": self.cli.n.to_string(),
            "refine": self.cli.refine.to_string(),
            "tol_parallel": self.cfg.tol_parallel.encode(),
        })
    }

    fn bundle(&self) -> ArtifactBundle {
        ArtifactBundle { seed: Some(self.cli.seed), config: self.config_snapshot(), ..Default::default() }
    }

    fn triangulation(&self) -> Result<Arc<Triangulation>, Failure> {
        if let Some(t) = self.input.as_ref().and_then(|b| b.triangulation.as_ref()) {
            return Ok(Arc::new(Triangulation::from_json(t).map_err(config_err)?));
        }
        Ok(Arc::new(build_unit_cube_triangulation(self.cli.n, self.cli.refine).map_err(config_err)?))
    }

    fn map(&self, tri: &Arc<Triangulation>) -> Result<PeriodicPwaMap<S>, Failure> {
        if let Some(m) = self.input.as_ref().and_then(|b| b.map.as_ref()) {
            return PeriodicPwaMap::from_json(tri.clone(), m).map_err(config_err);
        }
        build_instance(tri.clone(), self.kind, self.cli.amplitude, self.cli.seed).map_err(config_err)
    }

    fn dispatch(self) -> Result<Output, Failure> {
        match self.cli.command {
            Command::Triangulate => self.triangulate(),
            Command::SampleMap => self.sample_map(),
            Command::Extract => self.extract(),
            Command::Select => self.select(),
            Command::Decompose => self.decompose(),
            Command::Verify => self.verify(),
            Command::Jensen => self.jensen(),
            Command::OracleCompare => self.oracle_compare(),
            Command::Report => unreachable!("handled before dispatch"),
        }
    }

    fn triangulate(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let check = validate(&tri);
        let report = json!({
            "elements": tri.elements().len(),
            "interfaces": tri.interfaces().len(),
            "nodes": tri.node_count(),
            "normals": tri.normal_family().iter().map(|n| n.direction().to_vec()).collect::<Vec<_>>(),
            "valid": check.is_valid(),
            "violations": check.violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
        });
        let mut bundle = self.bundle();
        bundle.triangulation = Some(tri.to_json());
        let failure = (!check.is_valid()).then(|| Failure::Verification("triangulation failed validation".into()));
        Ok(Output { report, bundle: Some(bundle), failure })
    }

    fn sample_map(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let map = self.map(&tri)?;
        let mut bundle = self.bundle();
        bundle.triangulation = Some(tri.to_json());
        bundle.map = Some(map.to_json("payload.triangulation"));
        let report = json!({"instance": self.kind.name(), "nodes": tri.node_count(), "elements": tri.elements().len()});
        Ok(Output::ok(report, Some(bundle)))
    }

    fn measure_tol(measure: &GradientMeasure<S>) -> f64 {
        let scale = measure.atoms.iter().map(|a| a.matrix().max_abs().to_f64()).fold(1.0, f64::max);
        if S::EXACT {
            0.0
        } else {
            1e-10 * scale
        }
    }

    fn extract(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let map = self.map(&tri)?;
        let measure = map.extract_measure();
        let tol = Self::measure_tol(&measure);
        let bar = measure.barycenter().max_abs().to_f64();
        let jumps = check_jump_compatibility(&measure, &tri, tol);
        let report = json!({
            "atoms": measure.atoms.len(),
            "support": measure.merged(tol).len(),
            "barycenter_max_abs": bar.encode(),
            "jump_compatible": jumps.is_compatible(),
            "jump_violations": jumps.violations.len(),
        });
        let mut bundle = self.bundle();
        bundle.triangulation = Some(tri.to_json());
        bundle.map = Some(map.to_json("payload.triangulation"));
        bundle.measure = Some(measure.to_json());
        let failure = if !jumps.is_compatible() || bar > 1e-10 {
            Some(Failure::Verification("gradient measure failed barycenter or jump checks".into()))
        } else {
            None
        };
        Ok(Output { report, bundle: Some(bundle), failure })
    }

    fn select(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let map = self.map(&tri)?;
        let measure = map.extract_measure();
        let sel = select_tuples(&measure, &tri, self.depth).map_err(config_err)?;
        let report = json!({
            "depth": sel.m,
            "minimal_depth": sel.minimal_depth,
            "leaves": sel.leaves(),
            "pairs": sel.pair_interface.len(),
        });
        let mut bundle = self.bundle();
        bundle.triangulation = Some(tri.to_json());
        bundle.map = Some(map.to_json("payload.triangulation"));
        bundle.measure = Some(measure.to_json());
        bundle.selection = Some(sel.to_json());
        Ok(Output::ok(report, Some(bundle)))
    }

    fn decompose(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let map = self.map(&tri)?;
        let run = decompose(&map, self.depth, &self.cfg).map_err(config_err)?;
        let cert_ref = run.certificate.as_ref().map(|_| match &self.cli.out {
            Some(p) => format!("{}#payload.certificate", p.display()),
            None => "payload.certificate".to_string(),
        });
        let mut report = run.report.to_json(cert_ref.as_deref());
        let mut bundle = self.bundle();
        bundle.triangulation = Some(tri.to_json());
        bundle.map = Some(map.to_json("payload.triangulation"));
        bundle.measure = Some(run.measure.to_json());
        bundle.selection = Some(run.report.selection.to_json());
        if let Some(c) = &run.certificate {
            bundle.certificate = Some(c.tree.to_json("payload.measure"));
        }
        let failure = match (&run.report.outcome, &run.verification_error) {
            (_, Some(e)) => Some(Failure::Verification(e.clone())),
            (Outcome::Failed(_), _) => Some(Failure::NonConvergence(format!(
                "fixed-point search failed ({})",
                report["reason"]["kind"].as_str().unwrap_or("unknown")
            ))),
            _ => None,
        };
        if let (Some(e), Value::Object(m)) = (&run.verification_error, &mut report) {
            m.insert("verification_error".into(), json!(e));
        }
        let mut stored = report.clone();
        if run.certificate.is_some() {
            stored["certificate_path"] = json!("payload.certificate");
        }
        bundle.report = Some(stored);
        info!("decompose finished: {}", run.report.outcome.label());
        Ok(Output { report, bundle: Some(bundle), failure })
    }

    fn verify(self) -> Result<Output, Failure> {
        let input = self.input.as_ref().ok_or_else(|| config_err("verify needs --in"))?;
        let cert_json = input.certificate.as_ref().ok_or_else(|| config_err("bundle holds no certificate"))?;
        let measure_json = input.measure.as_ref().ok_or_else(|| config_err("bundle holds no measure"))?;
        let tree: HnTree<S> = HnTree::from_json(cert_json).map_err(config_err)?;
        let measure: GradientMeasure<S> = GradientMeasure::from_json(measure_json).map_err(config_err)?;
        let tol = Self::measure_tol(&measure);
        let cert = HnCertificate { tree, target: measure.merged(tol) };
        let check = validate_certificate(&cert, &RankOne, self.cfg.tol_parallel);
        let leaves_match = same_measure(&cert.tree.leaf_measure(tol), &cert.target, self.cfg.tol_membership, tol.max(self.cfg.tol_membership));
        let report = json!({
            "valid": check.is_valid() && leaves_match,
            "depth": cert.tree.depth(),
            "leaf_measure_matches": leaves_match,
            "violations": check.violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
        });
        let failure = (!(check.is_valid() && leaves_match))
            .then(|| Failure::Verification("certificate failed validation".into()));
        Ok(Output { report, bundle: None, failure })
    }

    fn jensen(self) -> Result<Output, Failure> {
        let params: Value = match &self.cli.params {
            Some(p) => serde_json::from_str(p).map_err(config_err)?,
            None => Value::Null,
        };
        let functions: Vec<TestFunction> = self
            .cli
            .functions
            .split(',')
            .map(|name| TestFunction::from_spec(name.trim(), &params, self.cli.n))
            .collect::<Result<_, _>>()
            .map_err(config_err)?;
        // Certificate leaves when a certificate is at hand, otherwise the map's measure.
        let (source, atoms) = match self.input.as_ref().and_then(|b| b.certificate.as_ref()) {
            Some(c) => {
                let tree: HnTree<S> = HnTree::from_json(c).map_err(config_err)?;
                ("certificate", tree.leaf_measure(self.cfg.tol_membership))
            }
            None => {
                let measure = match self.input.as_ref().and_then(|b| b.measure.as_ref()) {
                    Some(m) => GradientMeasure::from_json(m).map_err(config_err)?,
                    None => self.map(&self.triangulation()?)?.extract_measure(),
                };
                let atoms = measure.atoms.iter().map(|a| (a.matrix(), a.weight.clone())).collect::<Vec<_>>();
                ("measure", atoms)
            }
        };
        let mut rows = Vec::new();
        let mut bad = Vec::new();
        for f in &functions {
            let gap = jensen_gap_atoms(f, &atoms).to_f64();
            let class = f.class();
            let ok = match class {
                FunctionClass::RankOneAffine => gap.abs() <= 1e-9,
                FunctionClass::Neither => true,
                _ => gap >= -1e-9,
            };
            if !ok {
                bad.push(f.name());
            }
            rows.push(json!({"function": f.name(), "class": class.name(), "gap": gap.encode(), "ok": ok}));
        }
        let report = json!({"source": source, "atoms": atoms.len(), "gaps": rows});
        let failure = (!bad.is_empty()).then(|| Failure::Verification(format!("Jensen check failed for {}", bad.join(", "))));
        Ok(Output { report, bundle: None, failure })
    }

    fn oracle_compare(self) -> Result<Output, Failure> {
        let tri = self.triangulation()?;
        let seeds: Vec<u64> = (0..self.cli.count as u64).map(|i| self.cli.seed + i).collect();
        let results: Vec<_> = seeds
            .par_iter()
            .map(|&s| oracle_compare::<S>(tri.clone(), self.kind, self.cli.amplitude, s, self.depth, &self.cfg))
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        let mut agreed = 0;
        for r in results {
            let c = r.map_err(config_err)?;
            agreed += usize::from(c.agree);
            rows.push(json!({
                "seed": c.seed.to_string(),
                "support": c.support,
                "pipeline": c.pipeline_outcome,
                "pipeline_certificate": c.pipeline_certificate,
                "oracle_certificate": c.oracle_certificate,
                "agree": c.agree,
                "note": c.note,
            }));
        }
        let total = rows.len();
        let report = json!({
            "agreement": format!("{agreed}/{total}"),
            "instance": self.kind.name(),
            "instances": rows,
        });
        let mut bundle = self.bundle();
        bundle.report = Some(report.clone());
        let failure = (agreed != total).then(|| Failure::Verification(format!("agreement {agreed}/{total}")));
        Ok(Output { report, bundle: Some(bundle), failure })
    }
}

fn report(bundle: ArtifactBundle) -> Result<Output, Failure> {
    let present: Vec<&str> = [
        ("triangulation", bundle.triangulation.is_some()),
        ("map", bundle.map.is_some()),
        ("measure", bundle.measure.is_some()),
        ("selection", bundle.selection.is_some()),
        ("report", bundle.report.is_some()),
        ("certificate", bundle.certificate.is_some()),
    ]
    .iter()
    .filter(|(_, p)| *p)
    .map(|(n, _)| *n)
    .collect();
    let selection_depth = bundle.selection.as_ref().and_then(|s| s.get("m")).cloned();
    let report = json!({
        "content_hash": bundle.content_hash(),
        "seed": bundle.seed.map(|s| s.to_string()),
        "config": bundle.config,
        "artifacts": present,
        "selection_depth": selection_depth,
        "outcome": bundle.report.as_ref().and_then(|r| r.get("outcome")).cloned(),
    });
    Ok(Output::ok(report, None))
}
