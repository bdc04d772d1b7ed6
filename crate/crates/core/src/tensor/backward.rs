//! Adjoint rules for every primitive. Called in reverse tape order.

use super::{bilinear_cell, BilinearCell, Node, Op, Scalar, TensorId, GELU_C, GELU_K};

/// Accumulate into the gradient buffer of `t`, allocating it on first touch.
fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    t: TensorId,
    f: impl FnOnce(&mut [T]),
) {
    let n = &nodes[t.0];
    if !n.requires_grad {
        return;
    }
    let slot = &mut grads[t.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); n.rows * n.cols]);
    }
    f(slot.as_mut().unwrap());
}

pub(super) fn apply_adjoint<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    g: &[T],
) {
    let node = &nodes[id];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}

        Op::Matmul { a, b } => {
            let (m, n) = (rows, cols);
            let k = nodes[a.0].cols;
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            // dA[i,kk] += sum_j g[i,j] * B[kk,j]
            acc(nodes, grads, *a, |da| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (kk, dv) in darow.iter_mut().enumerate() {
                        let brow = &bd[kk * n..(kk + 1) * n];
                        let mut s = T::zero();
                        for (gv, bv) in grow.iter().zip(brow.iter()) {
                            s += *gv * *bv;
                        }
                        *dv += s;
                    }
                }
            });
            // dB[kk,j] += sum_i A[i,kk] * g[i,j]
            acc(nodes, grads, *b, |db| {
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        for (dv, gv) in dbrow.iter_mut().zip(grow.iter()) {
                            *dv += av * *gv;
                        }
                    }
                }
            });
        }

        Op::Transpose { a } => {
            acc(nodes, grads, *a, |da| {
                // out is [rows, cols] = [c_a, r_a]
                for i in 0..rows {
                    for j in 0..cols {
                        da[j * rows + i] += g[i * cols + j];
                    }
                }
            });
        }

        Op::Reshape { a } => {
            acc(nodes, grads, *a, |da| {
                for (dv, gv) in da.iter_mut().zip(g.iter()) {
                    *dv += *gv;
                }
            });
        }

        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut row0 = 0;
                for &p in parts {
                    let pr = nodes[p.0].rows;
                    acc(nodes, grads, p, |dp| {
                        let src = &g[row0 * cols..(row0 + pr) * cols];
                        for (dv, gv) in dp.iter_mut().zip(src.iter()) {
                            *dv += *gv;
                        }
                    });
                    row0 += pr;
                }
            } else {
                let mut col0 = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    acc(nodes, grads, p, |dp| {
                        for i in 0..rows {
                            for j in 0..pc {
                                dp[i * pc + j] += g[i * cols + col0 + j];
                            }
                        }
                    });
                    col0 += pc;
                }
            }
        }

        Op::SliceCols { a, start } => {
            let ac = nodes[a.0].cols;
            acc(nodes, grads, *a, |da| {
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * ac + start + j] += g[i * cols + j];
                    }
                }
            });
        }

        Op::GatherRows { a, idx } => {
            acc(nodes, grads, *a, |da| {
                for (i, &src_row) in idx.iter().enumerate() {
                    for j in 0..cols {
                        da[src_row * cols + j] += g[i * cols + j];
                    }
                }
            });
        }

        Op::RepeatRows { a, times } => {
            let ar = nodes[a.0].rows;
            acc(nodes, grads, *a, |da| {
                for i in 0..ar {
                    for t in 0..*times {
                        let grow = &g[(i * times + t) * cols..(i * times + t + 1) * cols];
                        for (dv, gv) in da[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                            *dv += *gv;
                        }
                    }
                }
            });
        }

        Op::GroupSumRows { a, group } => {
            let ar = nodes[a.0].rows;
            acc(nodes, grads, *a, |da| {
                for i in 0..ar {
                    let grow = &g[(i / group) * cols..(i / group + 1) * cols];
                    for (dv, gv) in da[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                        *dv += *gv;
                    }
                }
            });
        }

        Op::Add { a, b } => {
            for t in [a, b] {
                acc(nodes, grads, *t, |dt| {
                    for (dv, gv) in dt.iter_mut().zip(g.iter()) {
                        *dv += *gv;
                    }
                });
            }
        }

        Op::Sub { a, b } => {
            acc(nodes, grads, *a, |da| {
                for (dv, gv) in da.iter_mut().zip(g.iter()) {
                    *dv += *gv;
                }
            });
            acc(nodes, grads, *b, |db| {
                for (dv, gv) in db.iter_mut().zip(g.iter()) {
                    *dv -= *gv;
                }
            });
        }

        Op::Mul { a, b } => {
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            acc(nodes, grads, *a, |da| {
                for ((dv, gv), bv) in da.iter_mut().zip(g.iter()).zip(bd.iter()) {
                    *dv += *gv * *bv;
                }
            });
            acc(nodes, grads, *b, |db| {
                for ((dv, gv), av) in db.iter_mut().zip(g.iter()).zip(ad.iter()) {
                    *dv += *gv * *av;
                }
            });
        }

        Op::Div { a, b } => {
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            acc(nodes, grads, *a, |da| {
                for ((dv, gv), bv) in da.iter_mut().zip(g.iter()).zip(bd.iter()) {
                    *dv += *gv / *bv;
                }
            });
            acc(nodes, grads, *b, |db| {
                for (i, dv) in db.iter_mut().enumerate() {
                    *dv -= g[i] * ad[i] / (bd[i] * bd[i]);
                }
            });
        }

        Op::Maximum { a, b } | Op::Minimum { a, b } => {
            let bigger_wins = matches!(node.op, Op::Maximum { .. });
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            let half = T::from_f64c(0.5);
            let pick = |av: T, bv: T| -> (T, T) {
                if av == bv {
                    (half, half)
                } else if (av > bv) == bigger_wins {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::one())
                }
            };
            acc(nodes, grads, *a, |da| {
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv += g[i] * pick(ad[i], bd[i]).0;
                }
            });
            acc(nodes, grads, *b, |db| {
                for (i, dv) in db.iter_mut().enumerate() {
                    *dv += g[i] * pick(ad[i], bd[i]).1;
                }
            });
        }

        Op::Scale { a, c } => {
            let c = *c;
            acc(nodes, grads, *a, |da| {
                for (dv, gv) in da.iter_mut().zip(g.iter()) {
                    *dv += *gv * c;
                }
            });
        }

        Op::AddScalar { a } => {
            acc(nodes, grads, *a, |da| {
                for (dv, gv) in da.iter_mut().zip(g.iter()) {
                    *dv += *gv;
                }
            });
        }

        Op::Relu { a } => {
            let ad = &nodes[a.0].data;
            acc(nodes, grads, *a, |da| {
                for (i, dv) in da.iter_mut().enumerate() {
                    if ad[i] > T::zero() {
                        *dv += g[i];
                    }
                }
            });
        }

        Op::Gelu { a } => {
            let ad = &nodes[a.0].data;
            let kk = T::from_f64c(GELU_K);
            let cc = T::from_f64c(GELU_C);
            let half = T::from_f64c(0.5);
            let three = T::from_f64c(3.0);
            let one = T::one();
            acc(nodes, grads, *a, |da| {
                for (i, dv) in da.iter_mut().enumerate() {
                    let x = ad[i];
                    let u = kk * (x + cc * x * x * x);
                    let t = u.tanh();
                    let du = kk * (one + three * cc * x * x);
                    let d = half * (one + t) + half * x * (one - t * t) * du;
                    *dv += g[i] * d;
                }
            });
        }

        Op::Sigmoid { a } => {
            let y = &node.data;
            acc(nodes, grads, *a, |da| {
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv += g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }

        Op::AddRow { a, b } => {
            acc(nodes, grads, *a, |da| {
                for (dv, gv) in da.iter_mut().zip(g.iter()) {
                    *dv += *gv;
                }
            });
            acc(nodes, grads, *b, |db| {
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j];
                    }
                }
            });
        }

        Op::MulRow { a, b } => {
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            acc(nodes, grads, *a, |da| {
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] += g[i * cols + j] * bd[j];
                    }
                }
            });
            acc(nodes, grads, *b, |db| {
                for i in 0..rows {
                    for j in 0..cols {
                        db[j] += g[i * cols + j] * ad[i * cols + j];
                    }
                }
            });
        }

        Op::ScaleRows { a, s } => {
            let (ad, sd) = (&nodes[a.0].data, &nodes[s.0].data);
            acc(nodes, grads, *a, |da| {
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * cols + j] += g[i * cols + j] * sd[i];
                    }
                }
            });
            acc(nodes, grads, *s, |ds| {
                for i in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot += g[i * cols + j] * ad[i * cols + j];
                    }
                    ds[i] += dot;
                }
            });
        }

        Op::Softmax { a, axis } => {
            let y = &node.data;
            let (outer, inner, os, is) =
                if *axis == 1 { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
            acc(nodes, grads, *a, |da| {
                for o in 0..outer {
                    let mut dot = T::zero();
                    for i in 0..inner {
                        let k = o * os + i * is;
                        dot += g[k] * y[k];
                    }
                    for i in 0..inner {
                        let k = o * os + i * is;
                        da[k] += y[k] * (g[k] - dot);
                    }
                }
            });
        }

        Op::LayerNorm { a, eps } => {
            let y = &node.data; // standardized output
            let ad = &nodes[a.0].data;
            let nc = T::from_f64c(cols as f64);
            let eps = *eps;
            acc(nodes, grads, *a, |da| {
                for i in 0..rows {
                    let xrow = &ad[i * cols..(i + 1) * cols];
                    let yrow = &y[i * cols..(i + 1) * cols];
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mut mean = T::zero();
                    for &x in xrow {
                        mean += x;
                    }
                    mean = mean / nc;
                    let mut var = T::zero();
                    for &x in xrow {
                        let d = x - mean;
                        var += d * d;
                    }
                    var = var / nc;
                    let inv = T::one() / (var + eps).sqrt();
                    let mut gmean = T::zero();
                    let mut gydot = T::zero();
                    for j in 0..cols {
                        gmean += grow[j];
                        gydot += grow[j] * yrow[j];
                    }
                    gmean = gmean / nc;
                    gydot = gydot / nc;
                    for j in 0..cols {
                        da[i * cols + j] += inv * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
            });
        }

        Op::Mean { a } => {
            let n = T::from_f64c((nodes[a.0].rows * nodes[a.0].cols) as f64);
            let gv = g[0] / n;
            acc(nodes, grads, *a, |da| {
                for dv in da.iter_mut() {
                    *dv += gv;
                }
            });
        }

        Op::Sum { a } => {
            let gv = g[0];
            acc(nodes, grads, *a, |da| {
                for dv in da.iter_mut() {
                    *dv += gv;
                }
            });
        }

        Op::BilinearSample { grid, points, h, w } => {
            let (h, w) = (*h, *w);
            let gd = &nodes[grid.0].data;
            let pd = &nodes[points.0].data;
            let c = cols;
            acc(nodes, grads, *grid, |dg| {
                for i in 0..rows {
                    let x = pd[i * 2].to_f64c().clamp(0.0, 1.0);
                    let y = pd[i * 2 + 1].to_f64c().clamp(0.0, 1.0);
                    let BilinearCell { r0, r1, c0, c1, fx, fy } = bilinear_cell(x, y, h, w);
                    let w00 = T::from_f64c((1.0 - fy) * (1.0 - fx));
                    let w01 = T::from_f64c((1.0 - fy) * fx);
                    let w10 = T::from_f64c(fy * (1.0 - fx));
                    let w11 = T::from_f64c(fy * fx);
                    let grow = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        dg[(r0 * w + c0) * c + j] += w00 * grow[j];
                        dg[(r0 * w + c1) * c + j] += w01 * grow[j];
                        dg[(r1 * w + c0) * c + j] += w10 * grow[j];
                        dg[(r1 * w + c1) * c + j] += w11 * grow[j];
                    }
                }
            });
            acc(nodes, grads, *points, |dp| {
                for i in 0..rows {
                    let rx = pd[i * 2].to_f64c();
                    let ry = pd[i * 2 + 1].to_f64c();
                    let x = rx.clamp(0.0, 1.0);
                    let y = ry.clamp(0.0, 1.0);
                    let BilinearCell { r0, r1, c0, c1, fx, fy } = bilinear_cell(x, y, h, w);
                    let grow = &g[i * c..(i + 1) * c];
                    let mut dfx = 0.0;
                    let mut dfy = 0.0;
                    for j in 0..c {
                        let v00 = gd[(r0 * w + c0) * c + j].to_f64c();
                        let v01 = gd[(r0 * w + c1) * c + j].to_f64c();
                        let v10 = gd[(r1 * w + c0) * c + j].to_f64c();
                        let v11 = gd[(r1 * w + c1) * c + j].to_f64c();
                        let gj = grow[j].to_f64c();
                        dfx += gj * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dfy += gj * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    // d(unit coord)/d(fraction): u = x*w - 0.5; clamped points
                    // get zero gradient on the clamped axis.
                    if (0.0..=1.0).contains(&rx) {
                        dp[i * 2] += T::from_f64c(dfx * w as f64);
                    }
                    if (0.0..=1.0).contains(&ry) {
                        dp[i * 2 + 1] += T::from_f64c(dfy * h as f64);
                    }
                }
            });
        }

        Op::CrossEntropyLogits { logits, targets, weights } => {
            let ld = &nodes[logits.0].data;
            let c = nodes[logits.0].cols;
            let gv = g[0];
            acc(nodes, grads, *logits, |dl| {
                for (i, (&t, &wi)) in targets.iter().zip(weights.iter()).enumerate() {
                    let row = &ld[i * c..(i + 1) * c];
                    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut denom = T::zero();
                    for &v in row {
                        denom += (v - mx).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / denom;
                        let ind = if j == t { T::one() } else { T::zero() };
                        dl[i * c + j] += gv * wi * (p - ind);
                    }
                }
            });
        }

        Op::SmoothL1 { a, b, beta } => {
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            let beta = *beta;
            let d = |i: usize| -> T {
                let r = ad[i] - bd[i];
                (r / beta).max(-T::one()).min(T::one())
            };
            acc(nodes, grads, *a, |da| {
                for (i, dv) in da.iter_mut().enumerate() {
                    *dv += g[i] * d(i);
                }
            });
            acc(nodes, grads, *b, |db| {
                for (i, dv) in db.iter_mut().enumerate() {
                    *dv -= g[i] * d(i);
                }
            });
        }
    }
}
