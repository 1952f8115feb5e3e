//! The dense active-set QP solver on its own.

use aggsplit::qp::{solve_qp, QpOptions, QpProblem};
use nalgebra::{DMatrix, DVector};

fn main() {
    // min ½‖z − (2, 1)‖²  s.t.  z₁ + z₂ ≤ 2,  0 ≤ z ≤ 1.5
    let p = QpProblem::new(DMatrix::identity(2, 2), DVector::from_vec(vec![-2.0, -1.0]))
        .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![2.0]))
        .with_bounds(DVector::zeros(2), DVector::from_element(2, 1.5));
    let sol = solve_qp(&p, &QpOptions::default()).expect("solvable");
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    println!("z = {:?}", sol.z.as_slice());
    println!("row dual {:?}, upper-bound duals {:?}", sol.in_duals.as_slice(), sol.upper_duals.as_slice());
    println!("kkt residual {:.2e}", sol.kkt_residual);
}
