//! Independent reference solutions: exact lattice enumeration for tiny grids
//! and the Riccati solution of the fully observed LQ family.

mod lattice;
mod riccati;

pub use lattice::{
    enumerate_lattice, exhaustive_control_search, LatticeSolution, SearchResult, MAX_ASSIGNMENTS, MAX_LATTICE_STEPS,
    MAX_SEARCH_STEPS,
};
pub use riccati::{riccati_lq, RiccatiSolution, MIN_ODE_STEPS};
