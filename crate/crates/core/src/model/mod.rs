//! Problem instances: coefficient maps, dimensions, control set, horizon.

mod coefficients;
mod control;
mod instances;
mod lq;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use coefficients::{Coefficients, Dims, Fn1, Fn3, Fn6, Map1, Map3, Map6, Point, ScalarCoefficients};
pub use control::{
    control_distance, linear_minimize_over_u, project_onto_u, ControlPolicy, ControlProcess,
    ControlSet, LinearFeedback, MEMBERSHIP_TOL,
};
pub use instances::{make_double_well_instance, make_scalar_nonlinear_instance, DoubleWellParams, ScalarNonlinearParams};
pub use lq::{make_lq_instance, LqParams};
pub use validate::{
    inject_partial_defect, validate_problem, CoefficientName, FailureKind, PartialCheck, SamplePoint,
    ValidationFailure, ValidationReport,
};

use crate::error::{invalid, Result};

/// Structural facts an instance declares about itself; `validate_problem`
/// checks them on samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    /// `h(t, x, u) = h(t)`.
    pub control_free_observation: bool,
    /// `phi(x) = Phi x` for a constant matrix.
    pub linear_terminal_map: bool,
}

/// A complete problem instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dims: Dims,
    pub horizon: f64,
    pub initial_x: Vec<f64>,
    pub control_set: ControlSet,
    /// Declared uniform bound on `|sigma2|` and `|h|`.
    pub bound: f64,
    pub structure: Structure,
    coefficients: Arc<dyn Coefficients>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("initial_x", &self.initial_x)
            .field("control_set", &self.control_set)
            .field("bound", &self.bound)
            .field("structure", &self.structure)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        horizon: f64,
        initial_x: Vec<f64>,
        control_set: ControlSet,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if dims.n == 0 || dims.m == 0 || dims.k == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if initial_x.len() != dims.n || initial_x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial state must be finite with n components"));
        }
        if control_set.dim() != dims.k {
            return Err(invalid(format!(
                "control set has dimension {}, expected {}",
                control_set.dim(),
                dims.k
            )));
        }
        Ok(Self {
            name: name.into(),
            dims,
            horizon,
            initial_x,
            control_set,
            bound: f64::INFINITY,
            structure: Structure::default(),
            coefficients,
        })
    }

    /// Scalar instance (`n = m = k = 1`) from closures.
    pub fn scalar(
        name: impl Into<String>,
        horizon: f64,
        x0: f64,
        control_set: ControlSet,
        coefficients: ScalarCoefficients,
    ) -> Result<Self> {
        Self::new(name, Dims::scalar(), horizon, vec![x0], control_set, Arc::new(coefficients))
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn with_coefficients(&self, coefficients: Arc<dyn Coefficients>) -> Self {
        let mut s = self.clone();
        s.coefficients = coefficients;
        s
    }
}
