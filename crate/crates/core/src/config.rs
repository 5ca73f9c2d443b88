//! JSON run configuration.
//!
//! One document selects the experiment and the model and carries optional
//! `ocp`, `zoro`, `integrator`, `noise`, `sqp`, `closed_loop` and `scaling`
//! blocks. Matrices are row-major nested arrays. Everything is validated and
//! resolved into solver objects before any numeric work; errors name the
//! offending field and, where possible, its line in the document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::integrator::Scheme;
use crate::linalg::{from_rows, Mat, Vector};
use crate::model::ChainParams;
use crate::ocp::{build_chain_ocp, build_diff_drive_ocp, build_lti_ocp, ChainOcpOptions, DiffDriveScenario, LtiOcp, OcpSpec, TighteningSets};
use crate::scaling::{chain_zoro_config, ScalingSettings};
use crate::sim::ControllerKind;
use crate::sqp::SqpSettings;
use crate::zoro::{gamma_from_probability, GammaMethod, ZoroConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Solve,
    ClosedLoop,
    Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DiffDrive,
    HangingChain,
    Lti,
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document<'a> {
    experiment: Experiment,
    #[serde(default = "default_model")]
    model: ModelKind,
    #[serde(borrow, default)]
    ocp: Option<&'a RawValue>,
    #[serde(default)]
    zoro: Option<ZoroBlock>,
    #[serde(default)]
    integrator: Option<IntegratorBlock>,
    #[serde(default)]
    noise: NoiseBlock,
    #[serde(default)]
    sqp: SqpSettings,
    #[serde(default)]
    closed_loop: ClosedLoopBlock,
    #[serde(default)]
    scaling: ScalingBlock,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default = "default_repeats")]
    repeats: usize,
}

fn default_model() -> ModelKind {
    ModelKind::DiffDrive
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_repeats() -> usize {
    1
}

/// Overrides on the model's default robust setting.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoroBlock {
    p0_bar: Option<Rows>,
    k: Option<Rows>,
    w: Option<Rows>,
    g: Option<Rows>,
    gamma: Option<f64>,
    /// Alternative to `gamma`: derive it from a satisfaction probability.
    probability: Option<f64>,
    #[serde(default)]
    gamma_method: GammaMethod,
    tighten: Option<TighteningSets>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegratorBlock {
    scheme: Option<Scheme>,
    newton_iters: Option<usize>,
    jacobian_reuse: Option<bool>,
    num_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseBlock {
    /// Defaults to the robust setting's `G W G^T`.
    covariance: Option<Rows>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopBlock {
    pub controller: ControllerKind,
    pub n_steps: usize,
    /// Number of seeded runs, seeds `seed, seed + 1, ...`.
    pub runs: usize,
}

impl Default for ClosedLoopBlock {
    fn default() -> Self {
        Self {
            controller: ControllerKind::ZoroRti,
            n_steps: 100,
            runs: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScalingBlock {
    n_masses: Vec<usize>,
    noise_std: f64,
    gamma: f64,
}

impl Default for ScalingBlock {
    fn default() -> Self {
        let d = ScalingSettings::default();
        Self {
            n_masses: d.n_masses,
            noise_std: d.noise_std,
            gamma: d.gamma,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ChainBlock {
    n_mass: usize,
    options: ChainOcpOptions,
    params: ChainParams,
}

impl Default for ChainBlock {
    fn default() -> Self {
        Self {
            n_mass: 4,
            options: ChainOcpOptions::default(),
            params: ChainParams::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LtiBlock {
    a: Rows,
    b: Rows,
    q: Rows,
    r: Rows,
    q_terminal: Option<Rows>,
    n_intervals: usize,
    horizon: f64,
    x0: Vec<f64>,
    u_max: Option<f64>,
    x_max: Option<f64>,
}

/// Fully validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelKind,
    /// `None` for the scaling experiment, which builds one OCP per size.
    pub spec: Option<OcpSpec>,
    pub scenario: Option<DiffDriveScenario>,
    pub zoro: Option<ZoroConfig>,
    pub noise_covariance: Option<Mat>,
    pub seed: u64,
    pub sqp: SqpSettings,
    pub closed_loop: ClosedLoopBlock,
    pub scaling: ScalingSettings,
    pub output_dir: PathBuf,
    pub repeats: usize,
}

/// 1-based line of byte offset `pos` in `text`.
fn line_of(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Line of the key at the end of `path`, found by searching for each key in
/// turn after the previous one.
fn locate(text: &str, path: &[&str]) -> Option<usize> {
    let mut pos = 0;
    for key in path {
        let needle = format!("\"{key}\"");
        pos += text[pos..].find(&needle)?;
        pos += needle.len();
    }
    Some(line_of(text, pos))
}

fn at(text: &str, path: &[&str], msg: String) -> Error {
    let field = path.join(".");
    match locate(text, path) {
        Some(line) => Error::Config(format!("{field}: {msg} (line {line})")),
        None => Error::Config(format!("{field}: {msg}")),
    }
}

fn json_err(e: serde_json::Error, line_offset: usize) -> Error {
    let line = e.line() + line_offset;
    // serde's message already ends with "at line L column C" for the
    // document it parsed; report the line in the full document instead
    let msg = e.to_string();
    let msg = msg.split(" at line ").next().unwrap_or(&msg).to_owned();
    Error::Config(format!("{msg} (line {line}, column {})", e.column()))
}

fn matrix(text: &str, path: &[&str], rows: &Rows, shape: (usize, usize)) -> Result<Mat> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != rows[0].len()) {
        return Err(at(text, path, format!("ragged matrix: row {i} has {} entries, row 0 has {}", r.len(), rows[0].len())));
    }
    let m = from_rows(rows).ok_or_else(|| at(text, path, "ragged matrix".into()))?;
    if (m.nrows(), m.ncols()) != shape {
        return Err(at(text, path, format!("expected {}x{}, got {}x{}", shape.0, shape.1, m.nrows(), m.ncols())));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(at(text, path, "entries must be finite".into()));
    }
    Ok(m)
}

fn square(text: &str, path: &[&str], rows: &Rows) -> Result<Mat> {
    let n = rows.len();
    matrix(text, path, rows, (n, n))
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| json_err(e, 0))?;
        if doc.repeats == 0 {
            return Err(at(text, &["repeats"], "must be at least 1".into()));
        }
        doc.sqp.validate().map_err(|e| at(text, &["sqp"], e.to_string()))?;

        // model-specific OCP block, parsed with line numbers relative to the
        // whole document
        let ocp_line = doc.ocp.map_or(0, |raw| {
            let start = raw.get().as_ptr() as usize - text.as_ptr() as usize;
            line_of(text, start) - 1
        });
        let ocp_text = doc.ocp.map_or("{}", |r| r.get());

        let mut scenario = None;
        let mut chain = ChainBlock::default();
        let mut spec = match doc.model {
            ModelKind::DiffDrive => {
                let sc: DiffDriveScenario =
                    serde_json::from_str(ocp_text).map_err(|e| json_err(e, ocp_line))?;
                let spec = build_diff_drive_ocp(&sc).map_err(|e| at(text, &["ocp"], e.to_string()))?;
                scenario = Some(sc);
                Some(spec)
            }
            ModelKind::HangingChain => {
                chain = serde_json::from_str(ocp_text).map_err(|e| json_err(e, ocp_line))?;
                let spec = build_chain_ocp(chain.n_mass, chain.params, &chain.options)
                    .map_err(|e| at(text, &["ocp"], e.to_string()))?;
                Some(spec)
            }
            ModelKind::Lti => {
                let raw = doc.ocp.ok_or_else(|| Error::Config("ocp: the lti model needs an ocp block".into()))?;
                let b: LtiBlock = serde_json::from_str(raw.get()).map_err(|e| json_err(e, ocp_line))?;
                let a = square(text, &["ocp", "a"], &b.a)?;
                let nx = a.nrows();
                let nu = b.b.first().map_or(0, Vec::len);
                let p = LtiOcp {
                    b: matrix(text, &["ocp", "b"], &b.b, (nx, nu))?,
                    q: matrix(text, &["ocp", "q"], &b.q, (nx, nx))?,
                    r: matrix(text, &["ocp", "r"], &b.r, (nu, nu))?,
                    q_terminal: match &b.q_terminal {
                        Some(q) => matrix(text, &["ocp", "q_terminal"], q, (nx, nx))?,
                        None => matrix(text, &["ocp", "q"], &b.q, (nx, nx))?,
                    },
                    a,
                    n_intervals: b.n_intervals,
                    horizon: b.horizon,
                    x0: if b.x0.len() == nx {
                        Vector::from_vec(b.x0.clone())
                    } else {
                        return Err(at(text, &["ocp", "x0"], format!("expected {nx} entries, got {}", b.x0.len())));
                    },
                    u_max: b.u_max,
                    x_max: b.x_max,
                    integrator: None,
                };
                Some(build_lti_ocp(&p).map_err(|e| at(text, &["ocp"], e.to_string()))?)
            }
        };

        if let (Some(s), Some(ib)) = (spec.as_mut(), &doc.integrator) {
            let cfg = &mut s.integrator;
            if let Some(v) = ib.scheme {
                cfg.scheme = v;
            }
            if let Some(v) = ib.newton_iters {
                cfg.newton_iters = v;
            }
            if let Some(v) = ib.jacobian_reuse {
                cfg.jacobian_reuse = v;
            }
            if let Some(v) = ib.num_steps {
                cfg.num_steps = v;
            }
            cfg.validate().map_err(|e| at(text, &["integrator"], e.to_string()))?;
        }

        let zoro = match &spec {
            Some(s) => Some(resolve_zoro(text, s, doc.model, doc.zoro.as_ref().cloned().unwrap_or_default())?),
            None => None,
        };

        let noise_covariance = match (&doc.noise.covariance, &spec) {
            (Some(rows), Some(s)) => Some(matrix(text, &["noise", "covariance"], rows, (s.nx(), s.nx()))?),
            (None, Some(_)) => zoro.as_ref().map(|z| &z.g * &z.w * z.g.transpose()),
            _ => None,
        };

        match doc.experiment {
            Experiment::ClosedLoop if doc.model != ModelKind::DiffDrive => {
                return Err(at(text, &["model"], "closed_loop experiments need the diff_drive model".into()));
            }
            Experiment::Scaling if doc.model != ModelKind::HangingChain => {
                return Err(at(text, &["model"], "scaling experiments need the hanging_chain model".into()));
            }
            _ => {}
        }
        if doc.closed_loop.runs == 0 || doc.closed_loop.n_steps == 0 {
            return Err(at(text, &["closed_loop"], "runs and n_steps must be at least 1".into()));
        }
        if doc.scaling.n_masses.is_empty() || doc.scaling.n_masses.iter().any(|n| *n < 2) {
            return Err(at(text, &["scaling", "n_masses"], "needs at least one size, each >= 2".into()));
        }
        if !(doc.scaling.noise_std >= 0.0) || !(doc.scaling.gamma >= 0.0) {
            return Err(at(text, &["scaling"], "noise_std and gamma must be >= 0".into()));
        }
        let scaling = ScalingSettings {
            n_masses: doc.scaling.n_masses.clone(),
            chain: chain.options.clone(),
            params: chain.params,
            noise_std: doc.scaling.noise_std,
            gamma: doc.scaling.gamma,
            repeats: doc.repeats,
        };
        if doc.experiment == Experiment::Scaling {
            spec = None;
        }

        Ok(Self {
            experiment: doc.experiment,
            model: doc.model,
            zoro: if spec.is_some() { zoro } else { None },
            spec,
            scenario,
            noise_covariance,
            seed: doc.noise.seed,
            sqp: doc.sqp,
            closed_loop: doc.closed_loop,
            scaling,
            output_dir: doc.output_dir,
            repeats: doc.repeats,
        })
    }
}

fn resolve_zoro(text: &str, spec: &OcpSpec, model: ModelKind, b: ZoroBlock) -> Result<ZoroConfig> {
    let (nx, nu) = (spec.nx(), spec.nu());
    let mut cfg = match model {
        ModelKind::DiffDrive => ZoroConfig::diff_drive(spec)?,
        ModelKind::HangingChain => chain_zoro_config(spec, ScalingSettings::default().noise_std, 1.0),
        ModelKind::Lti => ZoroConfig::zero(spec),
    };
    let path = |f: &'static str| ["zoro", f];
    if let Some(rows) = &b.p0_bar {
        cfg.p0_bar = matrix(text, &path("p0_bar"), rows, (nx, nx))?;
    }
    if let Some(rows) = &b.k {
        cfg.k = matrix(text, &path("k"), rows, (nu, nx))?;
    }
    if let Some(rows) = &b.w {
        cfg.w = square(text, &path("w"), rows)?;
        if b.g.is_none() && cfg.w.nrows() != cfg.g.ncols() {
            return Err(at(text, &path("w"), format!("is {0}x{0} but g has {1} columns", cfg.w.nrows(), cfg.g.ncols())));
        }
    }
    if let Some(rows) = &b.g {
        cfg.g = matrix(text, &path("g"), rows, (nx, cfg.w.nrows()))?;
    }
    match (b.gamma, b.probability) {
        (Some(_), Some(_)) => return Err(at(text, &path("probability"), "give either gamma or probability, not both".into())),
        (Some(g), None) => cfg.gamma = g,
        (None, Some(p)) => {
            cfg.gamma = gamma_from_probability(p, b.gamma_method).map_err(|e| at(text, &path("probability"), e.to_string()))?
        }
        (None, None) => {}
    }
    if let Some(t) = b.tighten {
        cfg.tighten = t;
    }
    cfg.validate(spec).map_err(|e| at(text, &["zoro"], e.to_string()))?;
    Ok(cfg)
}
