//! Config-driven experiment recipes with deterministic seeding and CSV/JSON reports.
//!
//! Replication `r` of recipe step `s` draws from `derive_rng(seed, s, r)`, so
//! reports do not depend on thread scheduling. Wall time is left out of the
//! report on purpose: two runs of one config must produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{importance_sampling, trajectory_tree, GenerativeOracle};
use crate::capacity::{coverability, spanning_capacity, DEFAULT_NODE_BUDGET};
use crate::error::{Error, Result};
use crate::format;
use crate::instances::planted_singletons;
use crate::lowerbound::{
    build_hard_mdp, build_pi_ell, build_reference_mdp, check_pi_ell, draw_matrix, exact_value_hard,
    sample_blockfree_matrix, Decoder, SamplingMode,
};
use crate::mdp::{generate, LayeredMdp};
use crate::policy::PolicyClass;
use crate::popler::{default_n1, default_n2, popler, PoplerParams};
use crate::seed::derive_rng;
use crate::sunflower::{build_cert, SunflowerCert};

const STEP_INSTANCE: u64 = 1;
const STEP_POPLER: u64 = 2;
const STEP_BASELINES: u64 = 3;
const STEP_LOWERBOUND: u64 = 4;
const STEP_DECODER: u64 = 5;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub recipe: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSection {
    /// Class spec such as `singleton:K=3,H=2`.
    pub class: Option<String>,
    pub class_file: Option<PathBuf>,
    /// `planted`, `random` or `random_det`.
    pub mdp: Option<String>,
    pub mdp_file: Option<PathBuf>,
    pub cert_file: Option<PathBuf>,
    /// Width of the planted instance.
    pub k: Option<usize>,
    /// Horizons for `capacity-sweep`.
    pub horizons: Option<Vec<usize>>,
    /// `online` (default) or `generative`.
    pub access: Option<String>,
    // lower-bound family
    pub eps: Option<f64>,
    pub ell: Option<usize>,
    pub horizon: Option<usize>,
    pub locks: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub capacity_ub: Option<u64>,
    pub episodes: Option<usize>,
    pub trees: Option<usize>,
    pub budget: Option<usize>,
    pub retries: Option<usize>,
    /// Success rate below this makes the run a statistical failure.
    pub min_success: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub instance: InstanceSection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    /// Relative file paths resolve against this directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&format::read_file(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn class(&self) -> Result<PolicyClass> {
        match (&self.instance.class, &self.instance.class_file) {
            (Some(spec), None) => format::class_from_spec(spec),
            (None, Some(f)) => format::read_pclass(&format::read_file(self.path(f))?),
            (Some(_), Some(_)) => Err(Error::invalid("give either instance.class or instance.class_file, not both")),
            (None, None) => Err(Error::invalid("recipe needs instance.class or instance.class_file")),
        }
    }

    /// MDP, class and certificate for the learning recipes.
    fn learning_instance(&self) -> Result<(LayeredMdp, PolicyClass, SunflowerCert)> {
        if self.instance.mdp.as_deref() == Some("planted") {
            let p = planted_singletons(self.instance.k.unwrap_or(6))?;
            return Ok((p.mdp, p.class, p.cert));
        }
        let class = self.class()?;
        let mdp = match (&self.instance.mdp, &self.instance.mdp_file) {
            (None, Some(f)) => format::read_mdp(&format::read_file(self.path(f))?)?,
            (Some(g), None) => generated_mdp(g, &class, self.experiment.seed)?,
            _ => return Err(Error::invalid("give exactly one of instance.mdp and instance.mdp_file")),
        };
        if mdp.universe() != class.universe() {
            return Err(Error::invalid("class and MDP live on different universes"));
        }
        let cert = match &self.instance.cert_file {
            Some(f) => format::read_cert(&format::read_file(self.path(f))?)?,
            None => build_cert(&class)?,
        };
        cert.check_covers(&class)?;
        Ok((mdp, class, cert))
    }

    fn generative(&self) -> Result<bool> {
        match self.instance.access.as_deref() {
            None | Some("online") => Ok(false),
            Some("generative") => Ok(true),
            Some(x) => Err(Error::invalid(format!("unknown access mode `{x}`"))),
        }
    }
}

fn generated_mdp(name: &str, class: &PolicyClass, seed: u64) -> Result<LayeredMdp> {
    let mut rng = derive_rng(seed, STEP_INSTANCE, 0);
    match name {
        "random" => Ok(generate::random_mdp(class.universe(), &mut rng)),
        "random_det" => Ok(generate::random_det_mdp(class.universe(), &mut rng)),
        _ => Err(Error::invalid(format!("unknown MDP generator `{name}`"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
pub struct RunRecord {
    pub replication: usize,
    pub label: String,
    pub returned: Option<usize>,
    pub success: bool,
    /// The recipe's headline number (capacity, coverability, chosen value, ...).
    pub value: f64,
    /// Worst absolute estimation error, 0 when not applicable.
    pub error: f64,
    /// Trajectories or generative queries consumed.
    pub samples: u64,
    pub v_hat: Vec<f64>,
    pub exact: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
pub struct Aggregate {
    pub success_rate: f64,
    pub mean_error: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct RunReport {
    pub recipe: String,
    pub seed: u64,
    pub replications: usize,
    pub records: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

impl RunReport {
    fn new(cfg: &ExperimentConfig, records: Vec<RunRecord>) -> Self {
        let n = records.len();
        let aggregate = if n == 0 {
            Aggregate::default()
        } else {
            Aggregate {
                success_rate: records.iter().filter(|r| r.success).count() as f64 / n as f64,
                mean_error: records.iter().map(|r| r.error).sum::<f64>() / n as f64,
            }
        };
        RunReport {
            recipe: cfg.experiment.recipe.clone(),
            seed: cfg.experiment.seed,
            replications: cfg.experiment.replications,
            records,
            aggregate,
        }
    }

    /// False when the config sets `min_success` and the run falls short.
    pub fn meets_target(&self, cfg: &ExperimentConfig) -> bool {
        cfg.algorithm.min_success.is_none_or(|m| self.aggregate.success_rate >= m)
    }
}

pub const RECIPES: [&str; 5] = ["capacity-sweep", "coverability-check", "popler-e2e", "is-vs-trajtree", "lowerbound-audit"];

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let records = match cfg.experiment.recipe.as_str() {
        "capacity-sweep" => capacity_sweep(cfg)?,
        "coverability-check" => coverability_check(cfg)?,
        "popler-e2e" => popler_e2e(cfg)?,
        "is-vs-trajtree" => is_vs_trajtree(cfg)?,
        "lowerbound-audit" => lowerbound_audit(cfg)?,
        r => return Err(Error::invalid(format!("unknown recipe `{r}` (expected one of {})", RECIPES.join(", ")))),
    };
    Ok(RunReport::new(cfg, records))
}

fn reps(cfg: &ExperimentConfig) -> Vec<usize> {
    (0..cfg.experiment.replications).collect()
}

fn collect<T: Send>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// One record per swept horizon; `replications` is ignored.
fn capacity_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let spec = cfg.instance.class.as_deref().ok_or_else(|| Error::invalid("capacity-sweep needs instance.class"))?;
    if spec.to_ascii_uppercase().contains("H=") {
        return Err(Error::invalid("capacity-sweep sets H itself; drop it from instance.class"));
    }
    let horizons = cfg.instance.horizons.clone().ok_or_else(|| Error::invalid("capacity-sweep needs instance.horizons"))?;
    let budget = cfg.algorithm.budget.unwrap_or(DEFAULT_NODE_BUDGET);
    let sep = if spec.contains(':') { "," } else { ":" };
    let mut out = Vec::with_capacity(horizons.len());
    for (i, h) in horizons.into_iter().enumerate() {
        let class = format::class_from_spec(&format!("{spec}{sep}H={h}"))?;
        let r = spanning_capacity(&class, budget)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("horizon".into(), h as f64);
        metrics.insert("class_size".into(), class.len() as f64);
        metrics.insert("nodes_expanded".into(), r.nodes_expanded as f64);
        out.push(RunRecord {
            replication: i,
            label: format!("H={h}"),
            success: r.exact,
            value: r.value as f64,
            exact: r.per_layer.iter().map(|&x| x as f64).collect(),
            metrics,
            ..Default::default()
        });
    }
    Ok(out)
}

fn coverability_check(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let class = cfg.class()?;
    let budget = cfg.algorithm.budget.unwrap_or(DEFAULT_NODE_BUDGET);
    let cap = spanning_capacity(&class, budget)?;
    let det = cfg.instance.mdp.as_deref() == Some("random_det");
    let results: Vec<Result<RunRecord>> = reps(cfg)
        .into_par_iter()
        .map(|rep| {
            let mut rng = derive_rng(cfg.experiment.seed, STEP_INSTANCE, rep as u64);
            let mdp = if det {
                generate::random_det_mdp(class.universe(), &mut rng)
            } else {
                generate::random_mdp(class.universe(), &mut rng)
            };
            let cov = coverability(&class, &mdp)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("capacity".into(), cap.value as f64);
            Ok(RunRecord {
                replication: rep,
                label: "coverability".into(),
                success: cov <= cap.value as f64 + 1e-9,
                value: cov,
                metrics,
                ..Default::default()
            })
        })
        .collect();
    collect(results)
}

fn popler_params(cfg: &ExperimentConfig, class: &PolicyClass, cert: &SunflowerCert) -> Result<PoplerParams> {
    let a = &cfg.algorithm;
    let eps = a.eps.unwrap_or(0.1);
    let delta = a.delta.unwrap_or(0.1);
    let n1 = match (a.n1, a.c1) {
        (Some(n), _) => n,
        (None, Some(c)) => default_n1(c, cert.d, cert.k, class.len(), eps, delta),
        (None, None) => return Err(Error::invalid("popler needs algorithm.n1 or algorithm.c1")),
    };
    let n2 = match (a.n2, a.c2) {
        (Some(n), _) => n,
        (None, Some(c)) => default_n2(c, cert.d, cert.k, class.len(), eps, delta).max(1),
        (None, None) => return Err(Error::invalid("popler needs algorithm.n2 or algorithm.c2")),
    };
    Ok(PoplerParams { eps, delta, n1, n2, capacity_ub: a.capacity_ub })
}

fn max_error(v_hat: &[f64], exact: &[f64]) -> f64 {
    v_hat.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn is_optimal(exact: &[f64], i: usize) -> bool {
    let best = exact.iter().cloned().fold(f64::MIN, f64::max);
    exact[i] >= best - 1e-12
}

fn popler_e2e(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let (mdp, class, cert) = cfg.learning_instance()?;
    let mut params = popler_params(cfg, &class, &cert)?;
    if params.capacity_ub.is_none() {
        params.capacity_ub = Some(spanning_capacity(&class, cfg.algorithm.budget.unwrap_or(DEFAULT_NODE_BUDGET))?.value);
    }
    let exact: Vec<f64> = class.members().iter().map(|p| mdp.exact_policy_value(p)).collect();
    let results: Vec<Result<RunRecord>> = reps(cfg)
        .into_iter()
        .map(|rep| {
            let mut rng = derive_rng(cfg.experiment.seed, STEP_POPLER, rep as u64);
            let (returned, rep_out) = popler(&mdp, &class, &cert, &params, &mut rng)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("iterations".into(), rep_out.iterations as f64);
            metrics.insert("iteration_cap".into(), rep_out.iteration_cap);
            metrics.insert("reached".into(), rep_out.reached.len() as f64);
            metrics.insert("violations".into(), rep_out.violations as f64);
            metrics.insert("identification_violations".into(), rep_out.identification_violations as f64);
            Ok(RunRecord {
                replication: rep,
                label: "popler".into(),
                returned: Some(returned),
                success: is_optimal(&exact, returned),
                value: exact[returned],
                error: max_error(&rep_out.v_hat, &exact),
                samples: rep_out.reached.iter().map(|r| r.requested as u64).sum(),
                v_hat: rep_out.v_hat,
                exact: exact.clone(),
                metrics,
            })
        })
        .collect();
    collect(results)
}

fn is_vs_trajtree(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    if !cfg.generative()? {
        return Err(Error::invalid("is-vs-trajtree needs instance.access = \"generative\""));
    }
    let (mdp, class, _) = cfg.learning_instance()?;
    let trees = cfg.algorithm.trees.ok_or_else(|| Error::invalid("is-vs-trajtree needs algorithm.trees"))?;
    let episodes = cfg.algorithm.episodes.unwrap_or(trees);
    let cap = match cfg.algorithm.capacity_ub {
        Some(c) => c,
        None => spanning_capacity(&class, cfg.algorithm.budget.unwrap_or(DEFAULT_NODE_BUDGET))?.value,
    };
    let exact: Vec<f64> = class.members().iter().map(|p| mdp.exact_policy_value(p)).collect();
    let results: Vec<Result<RunRecord>> = reps(cfg)
        .into_par_iter()
        .map(|rep| {
            let mut rng = derive_rng(cfg.experiment.seed, STEP_BASELINES, rep as u64);
            let is = importance_sampling(&mdp, &class, episodes, &mut rng)?;
            let mut oracle = GenerativeOracle::new(&mdp);
            let tt = trajectory_tree(&mut oracle, &class, trees, &mut rng)?;
            let max_q = tt.per_tree_queries.iter().copied().max().unwrap_or(0);
            let mut metrics = BTreeMap::new();
            metrics.insert("is_success".into(), is_optimal(&exact, is.returned) as u8 as f64);
            metrics.insert("is_error".into(), max_error(&is.v_hat, &exact));
            metrics.insert("is_samples".into(), is.samples as f64);
            metrics.insert("max_tree_queries".into(), max_q as f64);
            metrics.insert("tree_query_bound".into(), (mdp.horizon() as u64 * cap) as f64);
            Ok(RunRecord {
                replication: rep,
                label: "trajtree".into(),
                returned: Some(tt.returned),
                success: is_optimal(&exact, tt.returned),
                value: exact[tt.returned],
                error: max_error(&tt.v_hat, &exact),
                samples: tt.queries,
                v_hat: tt.v_hat,
                exact: exact.clone(),
                metrics,
            })
        })
        .collect();
    collect(results)
}

fn lowerbound_audit(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let i = &cfg.instance;
    let eps = i.eps.ok_or_else(|| Error::invalid("lowerbound-audit needs instance.eps"))?;
    let ell = i.ell.ok_or_else(|| Error::invalid("lowerbound-audit needs instance.ell"))?;
    let h = i.horizon.ok_or_else(|| Error::invalid("lowerbound-audit needs instance.horizon"))?;
    let locks = i.locks.ok_or_else(|| Error::invalid("lowerbound-audit needs instance.locks"))?;
    let retries = cfg.algorithm.retries.unwrap_or(1000);
    let m0 = build_reference_mdp(locks, h)?;
    let results: Vec<Result<RunRecord>> = reps(cfg)
        .into_par_iter()
        .map(|rep| {
            let mut rng = derive_rng(cfg.experiment.seed, STEP_LOWERBOUND, rep as u64);
            let iid_pass = draw_matrix(eps, ell, locks, SamplingMode::Iid, &mut rng)?.check()?.passed();
            let mut metrics = BTreeMap::new();
            metrics.insert("iid_pass".into(), iid_pass as u8 as f64);
            let (b, attempts) = match sample_blockfree_matrix(eps, ell, locks, SamplingMode::ColumnConditioned, &mut rng, retries) {
                Ok(x) => x,
                Err(Error::Budget(_)) => {
                    metrics.insert("attempts".into(), retries as f64);
                    return Ok(RunRecord { replication: rep, label: "audit".into(), metrics, ..Default::default() });
                }
                Err(e) => return Err(e),
            };
            metrics.insert("attempts".into(), attempts as f64);
            let class = build_pi_ell(&b, h, locks)?;
            let props = check_pi_ell(&class, eps, locks);
            let pistar = rep % class.len();
            let dec = Decoder::sample(locks, h, &mut derive_rng(cfg.experiment.seed, STEP_DECODER, rep as u64));
            let inst = build_hard_mdp(&class, pistar, &dec)?;
            let mut formula_err: f64 = 0.0;
            let mut dp_err: f64 = 0.0;
            let mut m0_err: f64 = 0.0;
            let mut exact = Vec::with_capacity(class.len());
            for (m, p) in class.members().iter().enumerate() {
                let v = exact_value_hard(&inst, p)?;
                let want = if m == pistar { 0.5 + inst.relevant.len() as f64 / (4.0 * locks as f64) } else { 0.5 };
                formula_err = formula_err.max((v - want).abs());
                dp_err = dp_err.max((v - inst.mdp.exact_policy_value(p)).abs());
                m0_err = m0_err.max((m0.exact_policy_value(p) - 0.5).abs());
                exact.push(v);
            }
            metrics.insert("class_size".into(), class.len() as f64);
            metrics.insert("relevant".into(), inst.relevant.len() as f64);
            metrics.insert("properties".into(), props.passed() as u8 as f64);
            metrics.insert("dp_error".into(), dp_err);
            metrics.insert("m0_error".into(), m0_err);
            let error = formula_err.max(dp_err).max(m0_err);
            Ok(RunRecord {
                replication: rep,
                label: "audit".into(),
                returned: Some(pistar),
                success: props.passed() && error <= 1e-12,
                value: exact[pistar],
                error,
                exact,
                metrics,
                ..Default::default()
            })
        })
        .collect();
    collect(results)
}

// ---- emission ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid(format!("unknown report format `{s}`"))),
        }
    }
}

/// Rounds to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

fn rounded(report: &RunReport) -> RunReport {
    let mut r = report.clone();
    r.aggregate.success_rate = round12(r.aggregate.success_rate);
    r.aggregate.mean_error = round12(r.aggregate.mean_error);
    for rec in &mut r.records {
        rec.value = round12(rec.value);
        rec.error = round12(rec.error);
        rec.v_hat.iter_mut().for_each(|x| *x = round12(*x));
        rec.exact.iter_mut().for_each(|x| *x = round12(*x));
        rec.metrics.values_mut().for_each(|x| *x = round12(*x));
    }
    r
}

const CSV_COLUMNS: [&str; 9] = ["replication", "label", "returned", "success", "value", "error", "samples", "v_hat", "exact"];

pub fn render_report(report: &RunReport, fmt: ReportFormat) -> Result<String> {
    let r = rounded(report);
    match fmt {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&r)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let keys: BTreeSet<&String> = r.records.iter().flat_map(|x| x.metrics.keys()).collect();
            let mut out = String::new();
            let header: Vec<&str> = CSV_COLUMNS.iter().copied().chain(keys.iter().map(|k| k.as_str())).collect();
            writeln!(out, "{}", header.join(",")).unwrap();
            let list = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
            for rec in &r.records {
                let mut cells = vec![
                    rec.replication.to_string(),
                    rec.label.clone(),
                    rec.returned.map(|x| x.to_string()).unwrap_or_default(),
                    rec.success.to_string(),
                    rec.value.to_string(),
                    rec.error.to_string(),
                    rec.samples.to_string(),
                    list(&rec.v_hat),
                    list(&rec.exact),
                ];
                cells.extend(keys.iter().map(|k| rec.metrics.get(*k).map(|x| x.to_string()).unwrap_or_default()));
                writeln!(out, "{}", cells.join(",")).unwrap();
            }
            Ok(out)
        }
    }
}

pub fn parse_json_report(text: &str) -> Result<RunReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn emit_report(report: &RunReport, fmt: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    format::write_file(path, &render_report(report, fmt)?)
}
