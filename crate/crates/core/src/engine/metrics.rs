use std::io::Write;

use nalgebra::DVector;

use crate::layout::Layout;
use crate::problem::{aggregate, ProblemInstance};

pub const TRACE_HEADER: &str = "k,metric_a,metric_b,metric_c,metric_d,metric_e,metric_f,residual,wall_ms";

const FLOOR: f64 = 1e-12;

/// Per-iteration convergence metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    /// Mean relative step of `x_i`.
    pub metric_a: f64,
    /// Mean relative step of `y_i`.
    pub metric_b: f64,
    /// `‖max(0, Σ A_i x_i − c)‖`.
    pub metric_c: f64,
    /// Mean `‖y_ji − y_j‖` over edges.
    pub metric_d: f64,
    /// Mean `‖σ_i − Σ_{j≠i} A_j x_j‖` over agents.
    pub metric_e: f64,
    /// Mean relative distance of `x_i` to the reference minimizer.
    pub metric_f: Option<f64>,
    /// `‖ψ̄ − ψ‖`.
    pub operator_residual: f64,
    pub wall_ms: f64,
}

fn block(v: &DVector<f64>, r: std::ops::Range<usize>) -> DVector<f64> {
    DVector::from_column_slice(&v.as_slice()[r])
}

/// Metrics between consecutive `𝒜`-iterates `ψ(k)` and `ψ(k+1)`; (c), (d), (e) use `ψ(k+1)`.
#[allow(clippy::too_many_arguments)]
pub fn compute_metrics(
    k: usize,
    prev: &DVector<f64>,
    next: &DVector<f64>,
    instance: &ProblemInstance,
    layout: &Layout,
    x_star: Option<&DVector<f64>>,
    operator_residual: f64,
    wall_ms: f64,
) -> TraceRecord {
    let n = instance.n_agents();
    let nf = n as f64;
    let graph = instance.graph();
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..n {
        let (x0, x1) = (block(prev, layout.x(i)), block(next, layout.x(i)));
        a += (&x1 - &x0).norm() / (nf * x0.norm().max(FLOOR));
        let (y0, y1) = (block(prev, layout.y(i)), block(next, layout.y(i)));
        b += (&y1 - &y0).norm() / (nf * y0.norm().max(FLOOR));
    }
    let xs: Vec<DVector<f64>> = (0..n).map(|i| block(next, layout.x(i))).collect();
    let over = instance.total_coupling(&xs) - instance.capacity();
    let metric_c = over.map(|v| v.max(0.0)).norm();
    let e_count = graph.n_edges().max(1) as f64;
    let mut d = 0.0;
    for e in 0..graph.n_edges() {
        let tail = graph.edge(e).0;
        d += (block(next, layout.y_est(e)) - block(next, layout.y(tail))).norm() / e_count;
    }
    let mut track = 0.0;
    for i in 0..n {
        track += (block(next, layout.sigma(i)) - aggregate(instance, &xs, i)).norm() / nf;
    }
    let metric_f = x_star.map(|xs_star| {
        let mut f = 0.0;
        for i in 0..n {
            let target = block(xs_star, layout.x(i));
            f += (&xs[i] - &target).norm() / (nf * target.norm().max(FLOOR));
        }
        f
    });
    TraceRecord { k, metric_a: a, metric_b: b, metric_c, metric_d: d, metric_e: track, metric_f, operator_residual, wall_ms }
}

/// Writes the trace as CSV; an absent metric (f) is an empty field.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER.split(','))?;
    for r in trace {
        let f = r.metric_f.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([
            r.k.to_string(),
            format!("{:e}", r.metric_a),
            format!("{:e}", r.metric_b),
            format!("{:e}", r.metric_c),
            format!("{:e}", r.metric_d),
            format!("{:e}", r.metric_e),
            f,
            format!("{:e}", r.operator_residual),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
