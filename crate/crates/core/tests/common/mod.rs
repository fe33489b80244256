//! Random instance generators shared by the integration tests.
#![allow(dead_code, unused_imports)]

pub use ipmo::gradcheck::{random_instance, random_spd, random_weights, Instance};
use ipmo::solver::SolveResult;
use rand::Rng;

pub fn tight_solve(inst: &Instance) -> SolveResult {
    ipmo::gradcheck::tight_solve(inst).unwrap()
}

pub fn interior_instance(rng: &mut impl Rng, h: usize, n: usize, lambda: f64) -> (Instance, SolveResult) {
    ipmo::gradcheck::interior_instance(rng, h, n, lambda).unwrap()
}

pub fn boundary_instance(rng: &mut impl Rng, h: usize, n: usize, lambda: f64) -> (Instance, SolveResult, usize) {
    ipmo::gradcheck::boundary_instance(rng, h, n, lambda).unwrap()
}
