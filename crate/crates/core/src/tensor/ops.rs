//! Forward evaluation and vector-Jacobian products for every primitive.
//!
//! `forward` validates shapes and returns the output tensor plus whatever
//! residue the backward pass needs. `backward` assumes shapes were already
//! validated and returns one gradient buffer per input.

use super::{Ctx, Primitive, Tensor};
use crate::{Error, Result};

fn arity(p: &Primitive, inputs: &[&Tensor], want: usize) -> Result<()> {
    if inputs.len() == want {
        Ok(())
    } else {
        Err(Error::shape(
            p.name(),
            format!("takes {want} inputs, got {}", inputs.len()),
        ))
    }
}

fn same_shape(p: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            p.name(),
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ))
    }
}

fn check_labels(p: &Primitive, labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(
            p.name(),
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::shape(
            p.name(),
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    Ok(())
}

/// Max-shifted log-sum-exp of one slice together with its softmax weights.
fn lse_group(xs: &[f64], probs: &mut [f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (p, &v) in probs.iter_mut().zip(xs) {
        let e = (v - m).exp();
        *p = e;
        denom += e;
    }
    for p in probs.iter_mut() {
        *p /= denom;
    }
    m + denom.ln()
}

pub(crate) fn forward(p: &Primitive, x: &[&Tensor]) -> Result<(Tensor, Ctx)> {
    match p {
        Primitive::MatMul => {
            arity(p, x, 2)?;
            let (a, b) = (x[0], x[1]);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs two matrices, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            };
            if k != k2 {
                return Err(Error::shape(
                    p.name(),
                    format!("inner dims of {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    let av = ad[i * k + kk];
                    let brow = &bd[kk * n..kk * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok((Tensor::new(vec![m, n], out)?, Ctx::None))
        }

        Primitive::Conv2d { pad } => {
            arity(p, x, 2)?;
            let (img, wt) = (x[0], x[1]);
            let (&[n, ci, h, w], &[co, ci2, kh, kw]) = (img.shape(), wt.shape()) else {
                return Err(Error::shape(
                    p.name(),
                    format!(
                        "needs [n,ci,h,w] and [co,ci,kh,kw], got {:?} and {:?}",
                        img.shape(),
                        wt.shape()
                    ),
                ));
            };
            if ci != ci2 {
                return Err(Error::shape(
                    p.name(),
                    format!("input channels {:?} vs weight {:?}", img.shape(), wt.shape()),
                ));
            }
            let oh = (h + 2 * pad + 1).checked_sub(kh);
            let ow = (w + 2 * pad + 1).checked_sub(kw);
            let (Some(oh @ 1..), Some(ow @ 1..)) = (oh, ow) else {
                return Err(Error::shape(
                    p.name(),
                    format!("kernel {:?} larger than padded input {:?}", wt.shape(), img.shape()),
                ));
            };
            let (xd, wd) = (img.data(), wt.data());
            let mut out = vec![0.0; n * co * oh * ow];
            for ni in 0..n {
                for coi in 0..co {
                    let out_base = (ni * co + coi) * oh * ow;
                    for cii in 0..ci {
                        let x_base = (ni * ci + cii) * h * w;
                        let w_base = (coi * ci + cii) * kh * kw;
                        for khi in 0..kh {
                            let oh_lo = pad.saturating_sub(khi);
                            let oh_hi = oh.min((h + pad).saturating_sub(khi));
                            if oh_lo >= oh_hi {
                                continue;
                            }
                            for kwi in 0..kw {
                                let ow_lo = pad.saturating_sub(kwi);
                                let ow_hi = ow.min((w + pad).saturating_sub(kwi));
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let wv = wd[w_base + khi * kw + kwi];
                                let iw0 = ow_lo + kwi - pad;
                                let len = ow_hi - ow_lo;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi + khi - pad;
                                    let o0 = out_base + ohi * ow + ow_lo;
                                    let x0 = x_base + ih * w + iw0;
                                    let xrow = &xd[x0..x0 + len];
                                    for (o, &xv) in out[o0..o0 + len].iter_mut().zip(xrow) {
                                        *o += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((Tensor::new(vec![n, co, oh, ow], out)?, Ctx::None))
        }

        Primitive::BiasAdd => {
            arity(p, x, 2)?;
            let (a, b) = (x[0], x[1]);
            match (a.shape(), b.shape()) {
                (&[n, d], &[d2]) if d == d2 => {
                    let mut out = a.data().to_vec();
                    for i in 0..n {
                        for (o, bv) in out[i * d..(i + 1) * d].iter_mut().zip(b.data()) {
                            *o += bv;
                        }
                    }
                    Ok((Tensor::new(vec![n, d], out)?, Ctx::None))
                }
                (&[n, c, h, w], &[c2]) if c == c2 => {
                    let mut out = a.data().to_vec();
                    let plane = h * w;
                    for i in 0..n {
                        for ci in 0..c {
                            let bv = b.data()[ci];
                            let base = (i * c + ci) * plane;
                            for o in &mut out[base..base + plane] {
                                *o += bv;
                            }
                        }
                    }
                    Ok((Tensor::new(vec![n, c, h, w], out)?, Ctx::None))
                }
                _ => Err(Error::shape(
                    p.name(),
                    format!(
                        "needs [n,d]+[d] or [n,c,h,w]+[c], got {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ),
                )),
            }
        }

        Primitive::Relu => {
            arity(p, x, 1)?;
            Ok((x[0].map(|v| v.max(0.0)), Ctx::None))
        }

        Primitive::MaxPool2 => {
            arity(p, x, 1)?;
            let a = x[0];
            let &[n, c, h, w] = a.shape() else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs [n,c,h,w], got {:?}", a.shape()),
                ));
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    p.name(),
                    format!("spatial dims of {:?} must be even", a.shape()),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let d = a.data();
            let mut out = vec![0.0; n * c * oh * ow];
            let mut arg = vec![0usize; out.len()];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best_idx = in_base + (2 * ohi) * w + 2 * owi;
                        let mut best = d[best_idx];
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let idx = in_base + (2 * ohi + dh) * w + 2 * owi + dw;
                                if d[idx] > best {
                                    best = d[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[out_base + ohi * ow + owi] = best;
                        arg[out_base + ohi * ow + owi] = best_idx;
                    }
                }
            }
            Ok((Tensor::new(vec![n, c, oh, ow], out)?, Ctx::ArgMax(arg)))
        }

        Primitive::Flatten => {
            arity(p, x, 1)?;
            let a = x[0];
            if a.shape().len() < 2 {
                return Err(Error::shape(
                    p.name(),
                    format!("needs rank >= 2, got {:?}", a.shape()),
                ));
            }
            let n = a.shape()[0];
            let rest: usize = a.shape()[1..].iter().product();
            Ok((Tensor::new(vec![n, rest], a.data().to_vec())?, Ctx::None))
        }

        Primitive::SoftmaxCrossEntropy { labels } => {
            arity(p, x, 1)?;
            let a = x[0];
            let &[n, c] = a.shape() else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs [n,c] logits, got {:?}", a.shape()),
                ));
            };
            check_labels(p, labels, n, c)?;
            let d = a.data();
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for i in 0..n {
                let row = &d[i * c..(i + 1) * c];
                let lse = lse_group(row, &mut probs[i * c..(i + 1) * c]);
                loss += lse - row[labels[i]];
            }
            Ok((Tensor::scalar(loss / n as f64), Ctx::Probs(probs)))
        }

        Primitive::LogSumExp => {
            arity(p, x, 1)?;
            let a = x[0];
            if a.shape().is_empty() {
                return Err(Error::shape(
                    p.name(),
                    "needs rank >= 1, got a scalar".to_string(),
                ));
            }
            let d = *a.shape().last().unwrap();
            let groups = a.numel() / d;
            let mut probs = vec![0.0; a.numel()];
            let mut out = vec![0.0; groups];
            for g in 0..groups {
                out[g] = lse_group(&a.data()[g * d..(g + 1) * d], &mut probs[g * d..(g + 1) * d]);
            }
            let shape = a.shape()[..a.shape().len() - 1].to_vec();
            let t = if shape.is_empty() {
                Tensor::scalar(out[0])
            } else {
                Tensor::new(shape, out)?
            };
            Ok((t, Ctx::Probs(probs)))
        }

        Primitive::Cosine => {
            arity(p, x, 2)?;
            let (a, b) = (x[0], x[1]);
            if a.shape().len() != 1 || b.shape().len() != 1 {
                return Err(Error::shape(
                    p.name(),
                    format!("needs two vectors, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            same_shape(p, a, b)?;
            let (na, nb, dot) = cosine_parts(a.data(), b.data());
            let v = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            };
            Ok((Tensor::scalar(v), Ctx::None))
        }

        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity(p, x, 2)?;
            same_shape(p, x[0], x[1])?;
            let (a, b) = (x[0].data(), x[1].data());
            let out: Vec<f64> = match p {
                Primitive::Add => a.iter().zip(b).map(|(u, v)| u + v).collect(),
                Primitive::Sub => a.iter().zip(b).map(|(u, v)| u - v).collect(),
                _ => a.iter().zip(b).map(|(u, v)| u * v).collect(),
            };
            Ok((
                Tensor {
                    shape: x[0].shape().to_vec(),
                    data: std::sync::Arc::new(out),
                },
                Ctx::None,
            ))
        }

        Primitive::Scale { factor } => {
            arity(p, x, 1)?;
            if !factor.is_finite() {
                return Err(Error::invalid(format!("scale factor {factor} is not finite")));
            }
            let f = *factor;
            Ok((x[0].map(|v| v * f), Ctx::None))
        }

        Primitive::MeanReduce => {
            arity(p, x, 1)?;
            let a = x[0];
            let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
            Ok((Tensor::scalar(mean), Ctx::None))
        }

        Primitive::Sign => {
            arity(p, x, 1)?;
            Ok((
                x[0].map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
                Ctx::None,
            ))
        }

        Primitive::Row { index } => {
            arity(p, x, 1)?;
            let a = x[0];
            let &[n, d] = a.shape() else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs [n,d], got {:?}", a.shape()),
                ));
            };
            if *index >= n {
                return Err(Error::shape(
                    p.name(),
                    format!("row {index} out of range for {:?}", a.shape()),
                ));
            }
            let out = a.data()[index * d..(index + 1) * d].to_vec();
            Ok((Tensor::new(vec![d], out)?, Ctx::None))
        }

        Primitive::Stack => {
            if x.is_empty() {
                return Err(Error::shape(p.name(), "needs at least one input".to_string()));
            }
            let mut out = Vec::with_capacity(x.len());
            for t in x {
                out.push(t.scalar_value().map_err(|_| {
                    Error::shape(
                        p.name(),
                        format!("inputs must be scalars, got {:?}", t.shape()),
                    )
                })?);
            }
            let k = out.len();
            Ok((Tensor::new(vec![k], out)?, Ctx::None))
        }

        Primitive::TakeLabel { labels } => {
            arity(p, x, 1)?;
            let a = x[0];
            let &[n, c] = a.shape() else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs [n,c], got {:?}", a.shape()),
                ));
            };
            check_labels(p, labels, n, c)?;
            let out: Vec<f64> = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| a.data()[i * c + y])
                .collect();
            Ok((Tensor::new(vec![n], out)?, Ctx::None))
        }

        Primitive::DropLabel { labels } => {
            arity(p, x, 1)?;
            let a = x[0];
            let &[n, c] = a.shape() else {
                return Err(Error::shape(
                    p.name(),
                    format!("needs [n,c], got {:?}", a.shape()),
                ));
            };
            if c < 2 {
                return Err(Error::shape(
                    p.name(),
                    format!("needs at least 2 columns, got {:?}", a.shape()),
                ));
            }
            check_labels(p, labels, n, c)?;
            let mut out = Vec::with_capacity(n * (c - 1));
            for (i, &y) in labels.iter().enumerate() {
                let row = &a.data()[i * c..(i + 1) * c];
                out.extend_from_slice(&row[..y]);
                out.extend_from_slice(&row[y + 1..]);
            }
            Ok((Tensor::new(vec![n, c - 1], out)?, Ctx::None))
        }

        Primitive::MaxLastAxis => {
            arity(p, x, 1)?;
            let a = x[0];
            if a.shape().is_empty() {
                return Err(Error::shape(
                    p.name(),
                    "needs rank >= 1, got a scalar".to_string(),
                ));
            }
            let d = *a.shape().last().unwrap();
            let groups = a.numel() / d;
            let mut out = vec![0.0; groups];
            let mut arg = vec![0usize; groups];
            for g in 0..groups {
                let row = &a.data()[g * d..(g + 1) * d];
                let mut best = row[0];
                let mut best_j = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[g] = best;
                arg[g] = g * d + best_j;
            }
            let shape = a.shape()[..a.shape().len() - 1].to_vec();
            let t = if shape.is_empty() {
                Tensor::scalar(out[0])
            } else {
                Tensor::new(shape, out)?
            };
            Ok((t, Ctx::ArgMax(arg)))
        }
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut dot = 0.0;
    for (&u, &v) in a.iter().zip(b) {
        na += u * u;
        nb += v * v;
        dot += u * v;
    }
    (na.sqrt(), nb.sqrt(), dot)
}

pub(crate) fn backward(
    p: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    ctx: &Ctx,
    up: &[f64],
) -> Vec<Vec<f64>> {
    match p {
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (ad, bd) = (a.data(), b.data());
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let urow = &up[i * n..(i + 1) * n];
                for kk in 0..k {
                    let brow = &bd[kk * n..(kk + 1) * n];
                    let mut s = 0.0;
                    for (u, bv) in urow.iter().zip(brow) {
                        s += u * bv;
                    }
                    da[i * k + kk] = s;
                    let av = ad[i * k + kk];
                    for (dbv, u) in db[kk * n..(kk + 1) * n].iter_mut().zip(urow) {
                        *dbv += av * u;
                    }
                }
            }
            vec![da, db]
        }

        Primitive::Conv2d { pad } => {
            let (img, wt) = (x[0], x[1]);
            let (n, ci, h, w) = (
                img.shape()[0],
                img.shape()[1],
                img.shape()[2],
                img.shape()[3],
            );
            let (co, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let (xd, wd) = (img.data(), wt.data());
            let mut dx = vec![0.0; img.numel()];
            let mut dw = vec![0.0; wt.numel()];
            for ni in 0..n {
                for coi in 0..co {
                    let out_base = (ni * co + coi) * oh * ow;
                    for cii in 0..ci {
                        let x_base = (ni * ci + cii) * h * w;
                        let w_base = (coi * ci + cii) * kh * kw;
                        for khi in 0..kh {
                            let oh_lo = pad.saturating_sub(khi);
                            let oh_hi = oh.min((h + pad).saturating_sub(khi));
                            if oh_lo >= oh_hi {
                                continue;
                            }
                            for kwi in 0..kw {
                                let ow_lo = pad.saturating_sub(kwi);
                                let ow_hi = ow.min((w + pad).saturating_sub(kwi));
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let wv = wd[w_base + khi * kw + kwi];
                                let iw0 = ow_lo + kwi - pad;
                                let len = ow_hi - ow_lo;
                                let mut dwsum = 0.0;
                                for ohi in oh_lo..oh_hi {
                                    let ih = ohi + khi - pad;
                                    let o0 = out_base + ohi * ow + ow_lo;
                                    let x0 = x_base + ih * w + iw0;
                                    let urow = &up[o0..o0 + len];
                                    for (t, &u) in urow.iter().enumerate() {
                                        dx[x0 + t] += wv * u;
                                        dwsum += xd[x0 + t] * u;
                                    }
                                }
                                dw[w_base + khi * kw + kwi] += dwsum;
                            }
                        }
                    }
                }
            }
            vec![dx, dw]
        }

        Primitive::BiasAdd => {
            let (a, b) = (x[0], x[1]);
            let da = up.to_vec();
            let mut db = vec![0.0; b.numel()];
            match a.shape() {
                &[n, d] => {
                    for i in 0..n {
                        for (dbv, u) in db.iter_mut().zip(&up[i * d..(i + 1) * d]) {
                            *dbv += u;
                        }
                    }
                }
                &[n, c, h, w] => {
                    let plane = h * w;
                    for i in 0..n {
                        for ci in 0..c {
                            let base = (i * c + ci) * plane;
                            db[ci] += up[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
                _ => unreachable!("bias-add shapes validated in forward"),
            }
            vec![da, db]
        }

        Primitive::Relu => {
            let d = x[0].data();
            vec![up
                .iter()
                .zip(d)
                .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                .collect()]
        }

        Primitive::MaxPool2 => {
            let Ctx::ArgMax(arg) = ctx else {
                unreachable!("maxpool2 saves argmax")
            };
            let mut dx = vec![0.0; x[0].numel()];
            for (u, &idx) in up.iter().zip(arg) {
                dx[idx] += u;
            }
            vec![dx]
        }

        Primitive::Flatten => vec![up.to_vec()],

        Primitive::SoftmaxCrossEntropy { labels } => {
            let Ctx::Probs(probs) = ctx else {
                unreachable!("softmax-cross-entropy saves probs")
            };
            let n = labels.len();
            let c = x[0].shape()[1];
            let u = up[0] / n as f64;
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                    dx[i * c + j] = u * (probs[i * c + j] - indicator);
                }
            }
            vec![dx]
        }

        Primitive::LogSumExp => {
            let Ctx::Probs(probs) = ctx else {
                unreachable!("logsumexp saves softmax weights")
            };
            let d = *x[0].shape().last().unwrap();
            let mut dx = vec![0.0; x[0].numel()];
            for (g, &u) in up.iter().enumerate() {
                for j in 0..d {
                    dx[g * d + j] = u * probs[g * d + j];
                }
            }
            vec![dx]
        }

        Primitive::Cosine => {
            let (a, b) = (x[0].data(), x[1].data());
            let (na, nb, dot) = cosine_parts(a, b);
            if na == 0.0 || nb == 0.0 {
                return vec![vec![0.0; a.len()], vec![0.0; b.len()]];
            }
            let u = up[0];
            let cos = dot / (na * nb);
            let da = a
                .iter()
                .zip(b)
                .map(|(&av, &bv)| u * (bv / (na * nb) - cos * av / (na * na)))
                .collect();
            let db = a
                .iter()
                .zip(b)
                .map(|(&av, &bv)| u * (av / (na * nb) - cos * bv / (nb * nb)))
                .collect();
            vec![da, db]
        }

        Primitive::Add => vec![up.to_vec(), up.to_vec()],
        Primitive::Sub => vec![up.to_vec(), up.iter().map(|u| -u).collect()],
        Primitive::Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![
                up.iter().zip(b).map(|(u, &v)| u * v).collect(),
                up.iter().zip(a).map(|(u, &v)| u * v).collect(),
            ]
        }

        Primitive::Scale { factor } => vec![up.iter().map(|u| u * factor).collect()],

        Primitive::MeanReduce => {
            let n = x[0].numel();
            vec![vec![up[0] / n as f64; n]]
        }

        Primitive::Sign => vec![vec![0.0; x[0].numel()]],

        Primitive::Row { index } => {
            let (n, d) = (x[0].shape()[0], x[0].shape()[1]);
            let mut dx = vec![0.0; n * d];
            dx[index * d..(index + 1) * d].copy_from_slice(up);
            vec![dx]
        }

        Primitive::Stack => up.iter().map(|&u| vec![u]).collect(),

        Primitive::TakeLabel { labels } => {
            let c = x[0].shape()[1];
            let mut dx = vec![0.0; x[0].numel()];
            for (i, &y) in labels.iter().enumerate() {
                dx[i * c + y] = up[i];
            }
            vec![dx]
        }

        Primitive::DropLabel { labels } => {
            let c = x[0].shape()[1];
            let mut dx = vec![0.0; x[0].numel()];
            for (i, &y) in labels.iter().enumerate() {
                let urow = &up[i * (c - 1)..(i + 1) * (c - 1)];
                dx[i * c..i * c + y].copy_from_slice(&urow[..y]);
                dx[i * c + y + 1..(i + 1) * c].copy_from_slice(&urow[y..]);
            }
            vec![dx]
        }

        Primitive::MaxLastAxis => {
            let Ctx::ArgMax(arg) = ctx else {
                unreachable!("max saves argmax")
            };
            let mut dx = vec![0.0; x[0].numel()];
            for (u, &idx) in up.iter().zip(arg) {
                dx[idx] += u;
            }
            vec![dx]
        }
    }
}
