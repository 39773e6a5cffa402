//! Central finite-difference verification of analytic gradients.
//!
//! The checker evaluates a user-supplied scalar function twice per sampled
//! coordinate (at `θ ± eps`) and compares the central-difference slope with
//! the adjoint produced by the tape. It never inspects how the function was
//! built, so it stays independent of the gradient rules it certifies.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// A differentiable scalar function of the parameters. Implementations must
/// be deterministic for fixed inputs: any internal randomness (dropout) has
/// to be reseeded identically on every call.
pub type LossFn<'a> = dyn Fn(&mut Tape, &Bound) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Central-difference step. 1e-5 suits 64-bit builds.
    pub eps: Real,
    /// Pass threshold on the worst relative error.
    pub tol: Real,
    /// Coordinates sampled per parameter tensor (all coordinates when the
    /// tensor is at most this large).
    pub coords_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            tol: 1e-5,
            coords_per_param: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: Real,
    pub worst_coord: usize,
    pub worst_analytic: Real,
    pub worst_numeric: Real,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub tol: Real,
    pub eps: Real,
    pub params: Vec<FdParamReport>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> Real {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, Real::max)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "finite-diff check: {} (max rel err {:.3e}, tol {:.1e})\n",
            if self.pass() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        );
        for p in &self.params {
            s.push_str(&format!(
                "  {:<40} {:>3} coords  max rel err {:.3e}{}\n",
                p.name,
                p.coords_checked,
                p.max_rel_err,
                if p.max_rel_err > self.tol { "  <-- FAIL" } else { "" }
            ));
        }
        s
    }
}

/// Relative error with an absolute floor: below unit magnitude the
/// comparison degrades to absolute error, which keeps the check meaningful
/// for near-zero gradients without dividing by noise.
fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval(params: &ModelParams, f: &LossFn) -> Result<Real> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!(
            "finite_diff_check requires a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    Ok(tape.scalar_value(loss))
}

pub fn finite_diff_check(params: &ModelParams, f: &LossFn, cfg: &FdConfig) -> Result<FdReport> {
    finite_diff_check_inner(params, f, cfg, None)
}

/// Internals shared with the negative-control tests, which tamper with one
/// analytic coordinate to prove the checker flags corrupted rules.
pub(crate) fn finite_diff_check_inner(
    params: &ModelParams,
    f: &LossFn,
    cfg: &FdConfig,
    corrupt: Option<(&str, usize, Real)>,
) -> Result<FdReport> {
    // Determinism gate: two identical evaluations must agree bit for bit.
    let l0 = eval(params, f)?;
    let l1 = eval(params, f)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Determinism(format!(
            "two forward passes differ: {l0:?} vs {l1:?}"
        )));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<Real>> = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = tape
            .grad(bound.vars()[i])
            .expect("bound parameter missing gradient")
            .to_vec();
        analytic.push(g);
    }
    if let Some((name, coord, factor)) = corrupt {
        for (i, g) in analytic.iter_mut().enumerate() {
            if params.name(i) == name {
                g[coord] *= factor;
                g[coord] += 10.0 * cfg.eps; // also breaks exact zeros
            }
        }
    }

    let mut work = params.clone();
    let mut sample_rng = rng::seeded(cfg.seed);
    let mut reports = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let n = params.tensor(i).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut sample_rng);
            all.truncate(cfg.coords_per_param);
            all
        };
        let mut report = FdParamReport {
            name: params.name(i).to_string(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let orig = work.tensor(i).data()[c];
            work.tensor_mut(i).data_mut()[c] = orig + cfg.eps;
            let lp = eval(&work, f)?;
            work.tensor_mut(i).data_mut()[c] = orig - cfg.eps;
            let lm = eval(&work, f)?;
            work.tensor_mut(i).data_mut()[c] = orig;
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let err = rel_err(analytic[i][c], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_coord = c;
                report.worst_analytic = analytic[i][c];
                report.worst_numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(FdReport {
        tol: cfg.tol,
        eps: cfg.eps,
        params: reports,
    })
}

/// Gradient battery over the primitive tape operations, each wrapped into a
/// scalar loss over randomized inputs. Returns `(name, report)` pairs; every
/// report is expected to pass at 1e-5.
pub fn op_suite(seed: u64) -> Result<Vec<(String, FdReport)>> {
    use crate::tape::{Activation, Mode};
    use crate::tensor::Tensor;

    let mut out: Vec<(String, FdReport)> = Vec::new();
    let cfg = FdConfig::default();
    let mut rng = rng::seeded(seed);

    // Inputs are kept away from relu kinks by sampling magnitudes >= 0.1.
    let away = |shape: Vec<usize>, rng: &mut crate::rng::SeedableStream| {
        let mut t = Tensor::uniform(shape, 1.0, rng);
        for v in t.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.2 * v.signum().max(0.0) + 0.1;
            }
        }
        t
    };

    let mut check = |name: &str, params: ModelParams, f: &LossFn| -> Result<()> {
        let report = finite_diff_check(&params, f, &cfg)?;
        out.push((name.to_string(), report));
        Ok(())
    };

    // matmul
    let mut p = ModelParams::new();
    p.insert("a", Tensor::uniform(vec![3, 4], 1.0, &mut rng));
    p.insert("b", Tensor::uniform(vec![4, 5], 1.0, &mut rng));
    check("matmul", p, &|t, b| {
        let m = t.matmul(b.var("a"), b.var("b"))?;
        Ok(t.sum(m))
    })?;

    // matvec
    let mut p = ModelParams::new();
    p.insert("m", Tensor::uniform(vec![4, 3], 1.0, &mut rng));
    p.insert("v", Tensor::uniform(vec![3], 1.0, &mut rng));
    check("matvec", p, &|t, b| {
        let y = t.matvec(b.var("m"), b.var("v"))?;
        Ok(t.sum(y))
    })?;

    // transpose + mul + add + sub + affine chain
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![3, 2], 1.0, &mut rng));
    p.insert("y", Tensor::uniform(vec![2, 3], 1.0, &mut rng));
    check("transpose_mul_add_sub", p, &|t, b| {
        let xt = t.transpose(b.var("x"))?;
        let m = t.mul(xt, b.var("y"))?;
        let a = t.add(m, b.var("y"))?;
        let s = t.sub(a, xt)?;
        let sc = t.affine(s, 1.7, -0.3);
        Ok(t.sum(sc))
    })?;

    // activations
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        let mut p = ModelParams::new();
        p.insert("x", away(vec![7], &mut rng));
        check(name, p, &|t, b| {
            let y = t.activation(b.var("x"), kind);
            let w = t.affine(y, 0.9, 0.1);
            Ok(t.sum(w))
        })?;
    }

    // softmax jacobian (weighted sum makes every entry matter)
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![2, 5], 2.0, &mut rng));
    let weights = Tensor::uniform(vec![2, 5], 1.0, &mut rng);
    check("softmax", p, &|t, b| {
        let y = t.softmax(b.var("x"), 1)?;
        let w = t.constant(weights.clone());
        let m = t.mul(y, w)?;
        Ok(t.sum(m))
    })?;

    // conv2d at tol 1e-5 per kernel and input
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![2, 5, 5], 1.0, &mut rng));
    p.insert("k", Tensor::uniform(vec![3, 2, 3, 3], 1.0, &mut rng));
    check("conv2d", p, &|t, b| {
        let y = t.conv2d(b.var("x"), b.var("k"), 1)?;
        Ok(t.sum(y))
    })?;

    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![1, 6, 6], 1.0, &mut rng));
    p.insert("k", Tensor::uniform(vec![2, 1, 2, 2], 1.0, &mut rng));
    check("conv2d_stride2", p, &|t, b| {
        let y = t.conv2d(b.var("x"), b.var("k"), 2)?;
        Ok(t.sum(y))
    })?;

    // dropout with a fixed internal seed (deterministic mask)
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![40], 1.0, &mut rng));
    check("dropout", p, &|t, b| {
        let mut mask_rng = rng::seeded(977);
        let y = t.dropout(b.var("x"), 0.5, Mode::Train, &mut mask_rng)?;
        Ok(t.sum(y))
    })?;

    // cosine similarity
    let mut p = ModelParams::new();
    p.insert("a", away(vec![6], &mut rng));
    p.insert("b", away(vec![6], &mut rng));
    check("cosine_similarity", p, &|t, b| {
        t.cosine(b.var("a"), b.var("b"))
    })?;

    // dot
    let mut p = ModelParams::new();
    p.insert("a", Tensor::uniform(vec![5], 1.0, &mut rng));
    p.insert("b", Tensor::uniform(vec![5], 1.0, &mut rng));
    check("dot", p, &|t, b| t.dot(b.var("a"), b.var("b")))?;

    // bias broadcasts
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![3, 4], 1.0, &mut rng));
    p.insert("b", Tensor::uniform(vec![4], 1.0, &mut rng));
    check("add_bias", p, &|t, b| {
        let y = t.add_bias(b.var("x"), b.var("b"))?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;

    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![2, 3, 3], 1.0, &mut rng));
    p.insert("b", Tensor::uniform(vec![2], 1.0, &mut rng));
    check("add_channel_bias", p, &|t, b| {
        let y = t.add_channel_bias(b.var("x"), b.var("b"))?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;

    // structural ops: stack, stack_rows, concat, row, crop, reshape, gather
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![4, 3], 1.0, &mut rng));
    check("structural", p, &|t, b| {
        let x = b.var("x");
        let r0 = t.row(x, 0)?;
        let r2 = t.row(x, 2)?;
        let cat = t.concat(r0, r2)?;
        let mat = t.stack_rows(&[cat, cat])?;
        let resh = t.reshape(mat, vec![12])?;
        let s1 = t.sum(resh);
        let d = t.dot(r0, r2)?;
        let v = t.stack(&[s1, d])?;
        Ok(t.sum(v))
    })?;

    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![1, 5, 5], 1.0, &mut rng));
    check("center_crop", p, &|t, b| {
        let y = t.center_crop(b.var("x"), 3, 3)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?;

    let mut p = ModelParams::new();
    p.insert("table", Tensor::uniform(vec![6, 4], 1.0, &mut rng));
    check("gather_rows", p, &|t, b| {
        let g = t.gather_rows(b.var("table"), &[1, 3, 1])?;
        let sq = t.mul(g, g)?;
        Ok(t.sum(sq))
    })?;

    // logsumexp
    let mut p = ModelParams::new();
    p.insert("x", Tensor::uniform(vec![6], 2.0, &mut rng));
    check("logsumexp", p, &|t, b| t.logsumexp(b.var("x")))?;

    // ln
    let mut p = ModelParams::new();
    p.insert(
        "x",
        Tensor::new(vec![4], vec![0.3, 1.2, 2.5, 0.8]).unwrap(),
    );
    check("ln", p, &|t, b| {
        let y = t.ln(b.var("x"))?;
        Ok(t.sum(y))
    })?;

    // bce from scores (scores squashed into (0,1) by a sigmoid of params)
    let mut p = ModelParams::new();
    p.insert("z", Tensor::uniform(vec![5], 2.0, &mut rng));
    let targets = Tensor::new(vec![5], vec![1.0, 0.0, 0.5, 0.25, 1.0]).unwrap();
    let targets2 = targets.clone();
    check("bce_from_scores", p, &move |t, b| {
        let s = t.sigmoid(b.var("z"));
        t.bce_from_scores(s, &targets)
    })?;

    // bce with logits
    let mut p = ModelParams::new();
    p.insert("z", Tensor::uniform(vec![5], 3.0, &mut rng));
    check("bce_with_logits", p, &move |t, b| {
        t.bce_with_logits(b.var("z"), &targets2)
    })?;

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_twice_the_point() {
        let mut rng = rng::seeded(21);
        let mut params = ModelParams::new();
        params.insert("w", Tensor::uniform(vec![6], 1.0, &mut rng));
        let cfg = FdConfig {
            tol: 1e-8,
            ..FdConfig::default()
        };
        let report = finite_diff_check(
            &params,
            &|t, b| {
                let w = b.var("w");
                let sq = t.mul(w, w)?;
                Ok(t.sum(sq))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn softmax_cross_entropy_passes_at_1e6() {
        let mut rng = rng::seeded(22);
        let mut params = ModelParams::new();
        params.insert("logits", Tensor::uniform(vec![7], 2.0, &mut rng));
        let target = 3usize;
        let cfg = FdConfig {
            tol: 1e-6,
            ..FdConfig::default()
        };
        let report = finite_diff_check(
            &params,
            &|t, b| {
                let p = t.softmax(b.var("logits"), 0)?;
                let lp = t.ln(p)?;
                let mut onehot = vec![0.0; 7];
                onehot[target] = 1.0;
                let oh = t.constant(Tensor::new(vec![7], onehot).unwrap());
                let picked = t.dot(lp, oh)?;
                Ok(t.affine(picked, -1.0, 0.0))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut rng = rng::seeded(23);
        let mut params = ModelParams::new();
        params.insert("w", Tensor::uniform(vec![4], 1.0, &mut rng));
        let cfg = FdConfig::default();
        let f: &LossFn = &|t: &mut Tape, b: &Bound| {
            let w = b.var("w");
            let sq = t.mul(w, w)?;
            Ok(t.sum(sq))
        };
        let clean = finite_diff_check_inner(&params, f, &cfg, None).unwrap();
        assert!(clean.pass());
        let corrupted =
            finite_diff_check_inner(&params, f, &cfg, Some(("w", 2, 1.5))).unwrap();
        assert!(!corrupted.pass(), "{}", corrupted.summary());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let mut params = ModelParams::new();
        params.insert("w", Tensor::scalar(1.0));
        let calls = Cell::new(0.0);
        let err = finite_diff_check(
            &params,
            &|t, b| {
                calls.set(calls.get() + 1.0);
                let noise = t.scalar_const(calls.get());
                let w = b.var("w");
                let m = t.mul(w, noise)?;
                Ok(t.scale(m, 1.0))
            },
            &FdConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }

    #[test]
    fn op_suite_passes_everywhere() {
        for (name, report) in op_suite(0xfeed).unwrap() {
            assert!(report.pass(), "{name}: {}", report.summary());
        }
    }
}
