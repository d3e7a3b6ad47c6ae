//! Reference distributions for Wald tests.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

fn student(dof: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// `P(|Z| >= |z|)`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    (2.0 * std_normal().sf(z.abs())).min(1.0)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    student(dof).cdf(t)
}

/// `P(|T| >= |t|)` with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    (2.0 * student(dof).sf(t.abs())).min(1.0)
}

/// `P(T >= t)`.
pub fn student_t_upper_p(t: f64, dof: f64) -> f64 {
    student(dof).sf(t)
}

pub fn student_t_quantile(p: f64, dof: f64) -> f64 {
    student(dof).inverse_cdf(p)
}
