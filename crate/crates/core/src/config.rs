//! Run configuration (TOML) and control files (CSV).

use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    inject_partial_defect, make_double_well_instance, make_lq_instance, make_scalar_nonlinear_instance, CoefficientName,
    ControlProcess, ControlSet, DoubleWellParams, LqParams, ProblemSpec, ScalarNonlinearParams,
};
use crate::optimizer::{DescentParams, StepRule};
use crate::paths::{make_time_grid, TimeGrid};
use crate::regression::BasisSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Lq,
    ScalarNonlinear,
    DoubleWell,
}

/// Deliberately wrong partial, for exercising the validator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectConfig {
    pub coefficient: String,
    pub factor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub family: Family,
    pub lq: Option<LqParams>,
    pub scalar_nonlinear: Option<ScalarNonlinearParams>,
    pub double_well: Option<DoubleWellParams>,
    pub defect: Option<DefectConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            seed: 1,
            basis_degree: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    /// Claimed `epsilon`; computed against the oracle when absent.
    pub epsilon: Option<f64>,
    /// `C`; taken from a previous order study when absent.
    pub constant: Option<f64>,
    pub lambda: f64,
    pub convexity_probes: usize,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            constant: None,
            lambda: 0.5,
            convexity_probes: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub step_rule: StepRule,
    pub tol_gap: f64,
    /// Constant starting control; the centre of `U` when absent.
    pub initial_value: Option<Vec<f64>>,
    /// Starting control file (CSV); overrides `initial_value`.
    pub initial_control: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = DescentParams::default();
        Self {
            max_iter: d.max_iter,
            step_rule: d.step_rule,
            tol_gap: d.tol_gap,
            initial_value: None,
            initial_control: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderStudyConfig {
    pub deltas: Vec<f64>,
    /// Constant perturbation direction.
    pub direction: Vec<f64>,
}

impl Default for OrderStudyConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.03, 0.06, 0.12, 0.24, 0.48],
            direction: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub samples: usize,
    pub tol: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { samples: 100, tol: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Mesh points per step for the exhaustive search (grids of at most four steps).
    pub mesh_points: usize,
    pub ode_steps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mesh_points: 9,
            ode_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// Everything a CLI run needs. Every section is optional and unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub instance: InstanceConfig,
    pub grid: GridConfig,
    pub simulation: SimulationConfig,
    pub certificate: CertificateConfig,
    pub solver: SolverConfig,
    pub order_study: OrderStudyConfig,
    pub validate: ValidateConfig,
    pub oracle: OracleConfig,
    pub output: OutputConfig,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut chosen = 0;
        chosen += usize::from(self.instance.lq.is_some());
        chosen += usize::from(self.instance.scalar_nonlinear.is_some());
        chosen += usize::from(self.instance.double_well.is_some());
        let matches = match self.instance.family {
            Family::Lq => self.instance.scalar_nonlinear.is_none() && self.instance.double_well.is_none(),
            Family::ScalarNonlinear => self.instance.lq.is_none() && self.instance.double_well.is_none(),
            Family::DoubleWell => self.instance.lq.is_none() && self.instance.scalar_nonlinear.is_none(),
        };
        if chosen > 1 || !matches {
            return Err(Error::Config("parameter table does not match instance.family".into()));
        }
        if let Some(d) = &self.instance.defect {
            if CoefficientName::parse(&d.coefficient).is_none() {
                return Err(Error::Config(format!("unknown coefficient {:?} in instance.defect", d.coefficient)));
            }
            if !d.factor.is_finite() {
                return Err(Error::Config("instance.defect.factor must be finite".into()));
            }
        }
        if self.grid.steps == 0 {
            return Err(Error::Config("grid.steps must be at least 1".into()));
        }
        if self.simulation.n_paths == 0 {
            return Err(Error::Config("simulation.n_paths must be at least 1".into()));
        }
        if let Some(e) = self.certificate.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::Config(format!("certificate.epsilon must be >= 0, got {e}")));
            }
        }
        if let Some(c) = self.certificate.constant {
            positive("certificate.constant", c)?;
        }
        positive("certificate.lambda", self.certificate.lambda)?;
        if self.certificate.convexity_probes == 0 {
            return Err(Error::Config("certificate.convexity_probes must be at least 1".into()));
        }
        if !(self.solver.tol_gap.is_finite() && self.solver.tol_gap >= 0.0) {
            return Err(Error::Config("solver.tol_gap must be >= 0".into()));
        }
        if let StepRule::Projected { eta } = self.solver.step_rule {
            positive("solver.step_rule.eta", eta)?;
        }
        if self.order_study.deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config("order_study.deltas must be finite".into()));
        }
        if self.order_study.direction.is_empty() || self.order_study.direction.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config("order_study.direction must be a non-empty finite vector".into()));
        }
        if self.validate.samples == 0 {
            return Err(Error::Config("validate.samples must be at least 1".into()));
        }
        positive("validate.tol", self.validate.tol)?;
        if self.oracle.mesh_points == 0 {
            return Err(Error::Config("oracle.mesh_points must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lq_params(&self) -> Option<LqParams> {
        (self.instance.family == Family::Lq).then(|| self.instance.lq.clone().unwrap_or_default())
    }

    pub fn build_spec(&self) -> Result<ProblemSpec> {
        let spec = match self.instance.family {
            Family::Lq => make_lq_instance(&self.instance.lq.clone().unwrap_or_default())?,
            Family::ScalarNonlinear => {
                make_scalar_nonlinear_instance(&self.instance.scalar_nonlinear.clone().unwrap_or_default())?
            }
            Family::DoubleWell => make_double_well_instance(&self.instance.double_well.clone().unwrap_or_default())?,
        };
        Ok(match &self.instance.defect {
            Some(d) => {
                let name = CoefficientName::parse(&d.coefficient)
                    .ok_or_else(|| Error::Config(format!("unknown coefficient {:?}", d.coefficient)))?;
                inject_partial_defect(&spec, name, d.factor)
            }
            None => spec,
        })
    }

    pub fn time_grid(&self, spec: &ProblemSpec) -> Result<TimeGrid> {
        make_time_grid(spec.horizon, self.grid.steps)
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec {
            degree: self.simulation.basis_degree,
        }
    }

    pub fn descent_params(&self) -> DescentParams {
        DescentParams {
            max_iter: self.solver.max_iter,
            step_rule: self.solver.step_rule,
            n_paths: self.simulation.n_paths,
            seed: self.simulation.seed,
            tol_gap: self.solver.tol_gap,
            basis: self.basis(),
        }
    }
}

/// Writes `step, u0, u1, ...`, one row per step.
pub fn write_control_csv<W: Write>(u: &ControlProcess, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string()];
    header.extend((0..u.dim()).map(|c| format!("u{c}")));
    w.write_record(&header)?;
    for i in 0..u.steps() {
        let mut row = vec![i.to_string()];
        row.extend(u.value(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a control file for `grid`. Steps must appear in order `0..N` and
/// every value must lie in `set`.
pub fn read_control_csv<R: Read>(reader: R, grid: TimeGrid, set: &ControlSet) -> Result<ControlProcess> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let k = set.dim();
    let expected: Vec<String> = std::iter::once("step".to_string())
        .chain((0..k).map(|c| format!("u{c}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse(format!(
            "control header must be {}, got {}",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut values = Vec::with_capacity(grid.steps());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if row >= grid.steps() {
            return Err(Error::Parse(format!("control file has more than {} rows", grid.steps())));
        }
        let step: usize = rec[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad step {:?} on row {row}", &rec[0])))?;
        if step != row {
            return Err(Error::Parse(format!("expected step {row}, found {step}")));
        }
        let v = (1..=k)
            .map(|c| {
                rec[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse(format!("bad value {:?} on row {row}", &rec[c])))
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(v);
    }
    if values.len() != grid.steps() {
        return Err(Error::Parse(format!(
            "control file has {} rows, the grid has {} steps",
            values.len(),
            grid.steps()
        )));
    }
    ControlProcess::new(grid, values, set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.build_spec().unwrap().name, "lq");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[grid]\nstep = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[bogus]\n").is_err());
        assert!(RunConfig::from_toml_str("[instance.lq]\nalpha = 1.0\n").is_err());
    }

    #[test]
    fn values_are_validated() {
        assert!(RunConfig::from_toml_str("[grid]\nsteps = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[certificate]\nconstant = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[instance]\nfamily = \"double_well\"\n[instance.lq]\n").is_err());
        assert!(RunConfig::from_toml_str("[instance.defect]\ncoefficient = \"nope\"\nfactor = 2.0\n").is_err());
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
[instance]
family = "scalar_nonlinear"
[instance.scalar_nonlinear]
obs = 0.0
phi_wave = 0.0
[grid]
steps = 16
[simulation]
n_paths = 5000
seed = 9
[solver]
max_iter = 3
step_rule = { rule = "projected", eta = 0.5 }
[order_study]
deltas = [0.1, 0.2, 0.4]
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let spec = cfg.build_spec().unwrap();
        assert!(spec.structure.control_free_observation);
        assert_eq!(cfg.descent_params().step_rule, StepRule::Projected { eta: 0.5 });
    }

    #[test]
    fn control_csv_roundtrip_and_rejections() {
        let set = ControlSet::interval(-1.0, 1.0).unwrap();
        let g = make_time_grid(1.0, 3).unwrap();
        let u = ControlProcess::new(g, vec![vec![0.1], vec![-0.25], vec![1.0]], &set).unwrap();
        let mut buf = Vec::new();
        write_control_csv(&u, &mut buf).unwrap();
        assert_eq!(read_control_csv(&buf[..], g, &set).unwrap(), u);
        let bad = [
            "step,u0\n0,0.1\n1,0.2\n",
            "step,u0\n0,0.1\n2,0.2\n1,0.0\n",
            "step,u0\n0,0.1\n1,5.0\n2,0.0\n",
            "step,v\n0,0.1\n1,0.2\n2,0.0\n",
            "step,u0\n0,nan\n1,0.2\n2,0.0\n",
        ];
        for text in bad {
            assert!(read_control_csv(text.as_bytes(), g, &set).is_err(), "{text}");
        }
    }
}
