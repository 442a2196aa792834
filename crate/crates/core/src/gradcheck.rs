//! Finite-difference gradient verification for every autodiff primitive
//! and every composite layer. Central differences at h = 1e-6 in float64.

use std::rc::Rc;

use crate::autodiff::{Tape, TensorId};
use crate::layers::{
    Bound, CrossAttentionInteract, DiffusionBlock, MlpBlock, MultiHeadAttention, ParamSet,
    PatchAggregate, TransformerBlock,
};
use crate::linalg::Mat;
use crate::rng;
use crate::tokenize::Partitioning;

pub const FD_H: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative gradient error across inputs (0 when all gradients
    /// were zero on both sides).
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compare analytic gradients of `f` against central finite differences
/// for every entry of every input. The output is scalarized with fixed
/// random weights so the check covers arbitrary output shapes. Returns the
/// worst relative error.
pub fn fd_check(
    inputs: &[Mat],
    f: impl Fn(&Tape, &[TensorId]) -> crate::error::Result<TensorId>,
    seed: u64,
) -> f64 {
    let run = |mats: &[Mat], want_grads: bool| -> (f64, Vec<Option<Mat>>) {
        let tape = Tape::new();
        let ids: Vec<TensorId> = mats.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&tape, &ids).expect("forward failed");
        let ov = tape.value(out);
        let mut w_rng = rng::seeded(seed ^ 0xabcdef);
        let weights = Mat::from_fn(ov.rows(), ov.cols(), |_, _| rng::normal(&mut w_rng));
        let wl = tape.leaf(weights);
        let prod = tape.mul(out, wl).unwrap();
        let loss = tape.sum(prod).unwrap();
        let loss_val = tape.value(loss).at(0, 0);
        if !want_grads {
            return (loss_val, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = ids.iter().map(|&id| tape.grad(id)).collect();
        (loss_val, grads)
    };

    let (_, grads) = run(inputs, true);
    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        let analytic = grads[pi]
            .clone()
            .unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        let mut fd = Mat::zeros(input.rows(), input.cols());
        for e in 0..input.data().len() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[e] += FD_H;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[e] -= FD_H;
            let (lp, _) = run(&plus, false);
            let (lm, _) = run(&minus, false);
            fd.data_mut()[e] = (lp - lm) / (2.0 * FD_H);
        }
        // a parameter whose true gradient is zero (e.g. a bias that a
        // softmax row-shift cancels) leaves only cancellation noise in the
        // finite difference; both sides being tiny counts as agreement
        let atol = 1e-6;
        if analytic.frob_norm() <= atol && fd.frob_norm() <= atol {
            continue;
        }
        let denom = fd.frob_norm().max(analytic.frob_norm());
        let mut diff = analytic.clone();
        diff.add_scaled(&fd, -1.0);
        worst = worst.max(diff.frob_norm() / denom);
    }
    worst
}

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::seeded(seed);
    Mat::from_fn(rows, cols, |_, _| rng::normal(&mut r))
}

/// Random matrix with entries bounded away from zero (for kinked ops).
fn rand_mat_offzero(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng::seeded(seed);
    Mat::from_fn(rows, cols, |_, _| {
        let sign = if rand::Rng::gen_bool(&mut r, 0.5) {
            1.0
        } else {
            -1.0
        };
        sign * rand::Rng::gen_range(&mut r, 0.1..1.0)
    })
}

fn small_basis() -> Rc<crate::spectral::SpectralBasis> {
    let m = crate::mesh::normalize_mesh(&crate::mesh::shapes::icosphere(0, 1.0)).unwrap();
    let ops = crate::mesh::cotan_laplacian(&m).unwrap();
    Rc::new(crate::spectral::eigendecompose(&ops, 8).unwrap())
}

fn result(name: &str, err: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_err: err,
        passed: err < FD_TOL,
    }
}

/// Gradient checks for every primitive op.
pub fn run_primitive_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(result(
        "matmul",
        fd_check(&[rand_mat(3, 4, 1), rand_mat(4, 2, 2)], |t, ids| {
            t.matmul(ids[0], ids[1])
        }, 10),
    ));
    out.push(result(
        "matmul_nt",
        fd_check(&[rand_mat(3, 4, 3), rand_mat(5, 4, 4)], |t, ids| {
            t.matmul_nt(ids[0], ids[1])
        }, 11),
    ));
    out.push(result(
        "add",
        fd_check(&[rand_mat(3, 3, 5), rand_mat(3, 3, 6)], |t, ids| {
            t.add(ids[0], ids[1])
        }, 12),
    ));
    out.push(result(
        "add_row",
        fd_check(&[rand_mat(4, 3, 16), rand_mat(1, 3, 17)], |t, ids| {
            t.add_row(ids[0], ids[1])
        }, 18),
    ));
    out.push(result(
        "sub",
        fd_check(&[rand_mat(2, 4, 7), rand_mat(2, 4, 8)], |t, ids| {
            t.sub(ids[0], ids[1])
        }, 13),
    ));
    out.push(result(
        "mul",
        fd_check(&[rand_mat(3, 2, 9), rand_mat(3, 2, 14)], |t, ids| {
            t.mul(ids[0], ids[1])
        }, 15),
    ));
    out.push(result(
        "scalar_mul",
        fd_check(&[rand_mat(2, 3, 19)], |t, ids| t.scalar_mul(ids[0], -1.7), 20),
    ));
    out.push(result(
        "scale_by_scalar",
        fd_check(&[rand_mat(3, 3, 21), rand_mat(1, 1, 22)], |t, ids| {
            t.scale_by_scalar(ids[0], ids[1])
        }, 23),
    ));
    out.push(result(
        "exp",
        fd_check(&[rand_mat(3, 3, 24)], |t, ids| t.exp(ids[0]), 25),
    ));
    out.push(result(
        "relu",
        fd_check(&[rand_mat_offzero(4, 4, 26)], |t, ids| t.relu(ids[0]), 27),
    ));
    out.push(result(
        "gelu",
        fd_check(&[rand_mat(4, 3, 28)], |t, ids| t.gelu(ids[0]), 29),
    ));
    out.push(result(
        "softplus",
        fd_check(&[rand_mat(3, 4, 30)], |t, ids| t.softplus(ids[0]), 31),
    ));
    let mut r = rng::seeded(32);
    let pos = Mat::from_fn(3, 3, |_, _| rand::Rng::gen_range(&mut r, 0.2..2.0));
    out.push(result("log", fd_check(&[pos], |t, ids| t.log(ids[0]), 33)));
    out.push(result(
        "softmax_rows",
        fd_check(&[rand_mat(4, 5, 34)], |t, ids| t.softmax_rows(ids[0], None), 35),
    ));
    let mask = Mat::from_fn(4, 5, |i, j| {
        if (i + j) % 3 == 0 && i != j {
            crate::geodesic::MASK_DISALLOWED
        } else {
            0.0
        }
    });
    out.push(result(
        "softmax_rows_masked",
        fd_check(&[rand_mat(4, 5, 36)], move |t, ids| {
            t.softmax_rows(ids[0], Some(&mask))
        }, 37),
    ));
    out.push(result(
        "layer_norm",
        fd_check(
            &[rand_mat(4, 6, 38), rand_mat(1, 6, 39), rand_mat(1, 6, 40)],
            |t, ids| t.layer_norm(ids[0], ids[1], ids[2]),
            41,
        ),
    ));
    out.push(result(
        "dropout",
        fd_check(&[rand_mat(4, 4, 42)], |t, ids| {
            let mut rng = rng::seeded(99);
            t.dropout(ids[0], 0.5, true, &mut rng)
        }, 43),
    ));
    out.push(result(
        "concat_cols",
        fd_check(&[rand_mat(3, 2, 44), rand_mat(3, 4, 45)], |t, ids| {
            t.concat_cols(ids[0], ids[1])
        }, 46),
    ));
    out.push(result(
        "slice_cols",
        fd_check(&[rand_mat(3, 6, 47)], |t, ids| t.slice_cols(ids[0], 1, 3), 48),
    ));
    out.push(result(
        "gather_rows",
        fd_check(&[rand_mat(4, 3, 49)], |t, ids| {
            t.gather_rows(ids[0], &[2, 0, 0, 3, 1])
        }, 50),
    ));
    let assign = vec![0usize, 1, 0, 2, 1, 0];
    out.push(result(
        "segment_sum",
        fd_check(&[rand_mat(6, 3, 51)], {
            let assign = assign.clone();
            move |t, ids| t.segment_sum(ids[0], &assign, 3)
        }, 52),
    ));
    out.push(result(
        "segment_softmax",
        fd_check(&[rand_mat(6, 3, 53)], move |t, ids| {
            t.segment_softmax(ids[0], &assign, 3)
        }, 54),
    ));
    let basis = small_basis();
    let n = basis.n();
    let mut r = rng::seeded(55);
    let t_init = Mat::from_fn(1, 3, |_, _| rand::Rng::gen_range(&mut r, 0.05..0.5));
    out.push(result(
        "diffuse",
        fd_check(&[rand_mat(n, 3, 56), t_init], move |t, ids| {
            t.diffuse(ids[0], ids[1], &basis)
        }, 57),
    ));
    out.push(result(
        "mean_rows",
        fd_check(&[rand_mat(5, 3, 58)], |t, ids| t.mean_rows(ids[0]), 59),
    ));
    out.push(result(
        "sum",
        fd_check(&[rand_mat(3, 3, 60)], |t, ids| t.sum(ids[0]), 61),
    ));
    let labels = vec![2usize, 0, 1, 2];
    out.push(result(
        "cross_entropy",
        fd_check(&[rand_mat(4, 3, 62)], move |t, ids| {
            t.cross_entropy(ids[0], &labels)
        }, 63),
    ));
    out
}

fn bind_ids(ids: &[TensorId]) -> Bound {
    Bound::from_ids(ids.to_vec())
}

fn small_part() -> Partitioning {
    Partitioning::new(vec![0, 3], vec![0, 0, 0, 1, 1, 1]).unwrap()
}

/// Gradient checks through every composite layer's parameters.
pub fn run_layer_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();

    {
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(32);
        let block = MlpBlock::new(&mut ps, "b", 5, 0.0, &mut r);
        let x = rand_mat(4, 5, 33);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "mlp_block",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let xi = tape.leaf(x.clone());
                block.forward(tape, &bound, xi, false, &mut rng::seeded(0))
            }, 34),
        ));
    }
    {
        let basis = small_basis();
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(35);
        let block = DiffusionBlock::new(&mut ps, "d", 4, 0.0, &mut r);
        let x = rand_mat(basis.n(), 4, 36);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "diffusion_block",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let xi = tape.leaf(x.clone());
                block.forward(tape, &bound, xi, &basis, false, &mut rng::seeded(0))
            }, 37),
        ));
    }
    {
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(38);
        let agg = PatchAggregate::new(&mut ps, "a", 4, &mut r);
        let part = small_part();
        let x = rand_mat(6, 4, 39);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "patch_aggregate",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let xi = tape.leaf(x.clone());
                agg.forward(tape, &bound, xi, &part)
            }, 40),
        ));
    }
    {
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(41);
        let mha = MultiHeadAttention::new(&mut ps, "m", 6, 2, &mut r);
        let p = 4;
        let dist = Mat::from_fn(p, p, |i, j| ((i as f64) - (j as f64)).abs());
        let g = crate::geodesic::GeodesicMatrix::from_mat(dist).unwrap();
        let mask = crate::geodesic::build_mask(&g, 1.5).unwrap();
        let x = rand_mat(p, 6, 42);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "masked_mha",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let xi = tape.leaf(x.clone());
                mha.forward(tape, &bound, xi, Some(&mask))
            }, 43),
        ));
    }
    {
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(44);
        let block = TransformerBlock::new(&mut ps, "t", 4, 2, &mut r);
        let x = rand_mat(5, 4, 45);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "transformer_block",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let xi = tape.leaf(x.clone());
                block.forward(tape, &bound, xi, None)
            }, 46),
        ));
    }
    {
        let mut ps = ParamSet::default();
        let mut r = rng::seeded(47);
        let cross = CrossAttentionInteract::new(&mut ps, "x", 4, 2, &mut r);
        let f = rand_mat(3, 4, 48);
        let nodes = rand_mat(7, 4, 49);
        let inputs: Vec<Mat> = ps.values().to_vec();
        out.push(result(
            "cross_attention",
            fd_check(&inputs, move |tape, ids| {
                let bound = bind_ids(ids);
                let fi = tape.leaf(f.clone());
                let ni = tape.leaf(nodes.clone());
                cross.forward(tape, &bound, fi, ni)
            }, 50),
        ));
    }
    out
}

/// Every primitive and composite-layer check.
pub fn run_all_checks() -> Vec<CheckResult> {
    let mut out = run_primitive_checks();
    out.extend(run_layer_checks());
    out
}
