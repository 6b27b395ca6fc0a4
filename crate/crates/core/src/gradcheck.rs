//! Central finite-difference checks of tape adjoints.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};

/// Worst elementwise mismatch between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradients do not
/// blow up the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `d f / d inputs` where `f` builds a scalar from leaves holding
/// `inputs`. Every input element is perturbed by `+-h`.
pub fn check<F>(inputs: &[Array2<f64>], h: f64, f: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let up = eval(&work);
            work[k][[r, c]] = orig - h;
            let down = eval(&work);
            work[k][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[[r, c]];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut g = rng::stream(seed, &[&"gradcheck-test"]);
        Array2::from_shape_fn((r, c), |_| g.random_range(-1.0..1.0))
    }

    #[test]
    fn elementary_ops_pass() {
        let a = rand_mat(3, 4, 1);
        let b = rand_mat(4, 2, 2);
        let row = rand_mat(1, 2, 3);
        let rep = check(&[a, b, row], 1e-5, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let h = t.gelu(h);
            let h = t.softmax_rows(h);
            let h = t.mul_row(h, v[2]);
            t.sum_all(h)
        });
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn structural_ops_pass() {
        let a = rand_mat(4, 3, 4);
        let b = rand_mat(4, 3, 5);
        let s = Array2::from_elem((1, 1), 0.7);
        let rep = check(&[a, b, s], 1e-5, |t, v| {
            let x = t.concat_cols(&[v[0], v[1]]);
            let top = t.slice_rows(x, 0, 2);
            let bot = t.slice_rows(x, 2, 2);
            let y = t.concat_rows(&[bot, top]);
            let q = t.slice_cols(y, 1, 3);
            let k = t.slice_cols(y, 3, 3);
            let att = t.matmul_bt(q, k);
            let att = t.scale_var(att, v[2]);
            let n = t.normalize_rows(att);
            let m = t.mean_rows(n);
            let sq = t.mul(m, m);
            let g = t.gather(y, vec![(0, 1), (3, 5), (0, 1)]);
            let gs = t.sum_all(g);
            let ms = t.mean_all(sq);
            t.add(gs, ms)
        });
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn column_broadcast_and_pointwise_ops_pass() {
        let a = rand_mat(3, 4, 6).mapv(|x| x.abs() + 0.2);
        let c = rand_mat(3, 1, 7).mapv(|x| x.abs() + 0.5);
        let rep = check(&[a, c], 1e-5, |t, v| {
            let s = t.sum_cols(v[0]);
            let d = t.div_col(v[0], s);
            let m = t.mul_col(d, v[1]);
            let p = t.powf(m, -0.5);
            let l = t.ln(p);
            let sg = t.sigmoid(l);
            let cl = t.clamp(sg, 0.0, 0.9);
            let sc = t.scale(cl, 3.0);
            let sh = t.add_scalar(sc, 1.0);
            let sb = t.sub(sh, v[0]);
            t.mean_all(sb)
        });
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::ones((2, 2)));
        let b = t.leaf(Array2::ones((2, 2)));
        let s = t.sum_all(a);
        let g = t.backward(s);
        assert!(g.get(b).is_none());
        assert_eq!(g.get_or_zeros(b, (2, 2)), Array2::<f64>::zeros((2, 2)));
        assert_eq!(g.get(a).unwrap(), &Array2::<f64>::ones((2, 2)));
    }
}
