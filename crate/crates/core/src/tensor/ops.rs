use super::graph::{Op, Saved};
use super::{conv, Element, Tensor};
use crate::error::{Error, Result};

type Forward<T> = (Tensor<T>, Saved<T>);

pub(crate) fn forward<T: Element>(op: &Op, inputs: &[&Tensor<T>], keep: bool) -> Result<Forward<T>> {
    let plain = |t: Tensor<T>| Ok((t, Saved::Nothing));
    match op {
        Op::Leaf => Err(Error::Contract("leaf is not an operation".into())),
        Op::Add => plain(broadcast_binary("add", inputs[0], inputs[1], |a, b| a + b)?),
        Op::Mul => plain(broadcast_binary("mul", inputs[0], inputs[1], |a, b| a * b)?),
        Op::MatMul => plain(matmul(inputs[0], inputs[1])?),
        Op::Conv2dRowwise => plain(conv::forward(inputs[0], inputs[1], inputs[2])?),
        Op::Relu => plain(inputs[0].map(|v| if v > T::zero() { v } else { T::zero() })),
        Op::BatchNorm { eps } => batchnorm(inputs, *eps, keep),
        Op::BatchNormFrozen { eps } => plain(batchnorm_frozen(inputs, *eps)?.0),
        Op::GlobalAvgPool => plain(global_avg_pool(inputs[0])?),
        Op::SoftmaxCrossEntropy { targets } => softmax_cross_entropy(inputs[0], targets),
        Op::Reshape { shape } => {
            let x = inputs[0];
            let numel: usize = shape.iter().product();
            if numel != x.numel() {
                return Err(Error::shape("reshape", format!("{:?} -> {:?}", x.shape(), shape)));
            }
            plain(x.reshape(shape.clone())?)
        }
        Op::Sum => plain(Tensor::scalar(T::from_f64_lossy(sum_f64(inputs[0].data())))),
        Op::Mean => {
            let x = inputs[0];
            non_empty("mean", x)?;
            plain(Tensor::scalar(T::from_f64_lossy(sum_f64(x.data()) / x.numel() as f64)))
        }
        Op::Variance => {
            let x = inputs[0];
            non_empty("variance", x)?;
            plain(Tensor::scalar(T::from_f64_lossy(mean_var(x.data()).1)))
        }
        Op::Scale { factor } => {
            let f = T::from_f64_lossy(*factor);
            plain(inputs[0].map(|v| v * f))
        }
    }
}

/// Gradients with respect to each input; `None` where `needs` is false.
pub(crate) fn backward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let gate = |i: usize, f: &dyn Fn() -> Tensor<T>| if needs[i] { Some(f()) } else { None };
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => {
            let b = inputs[1];
            vec![
                gate(0, &|| grad.clone()),
                gate(1, &|| reduce_to(grad.data(), b.shape())),
            ]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = gate(0, &|| {
                broadcast_binary("mul", grad, b, |g, bv| g * bv).expect("forward validated")
            });
            let gb = gate(1, &|| {
                let prod: Vec<T> = grad.data().iter().zip(a.data()).map(|(&g, &av)| g * av).collect();
                reduce_to(&prod, b.shape())
            });
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = gate(0, &|| {
                let mut out = Tensor::zeros([m, k]);
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    (grad.data(), n, 1),
                    (b.data(), 1, n),
                    T::zero(),
                    (out.data_mut(), k, 1),
                );
                out
            });
            let gb = gate(1, &|| {
                let mut out = Tensor::zeros([k, n]);
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    (a.data(), 1, k),
                    (grad.data(), n, 1),
                    T::zero(),
                    (out.data_mut(), n, 1),
                );
                out
            });
            vec![ga, gb]
        }
        Op::Conv2dRowwise => {
            let (gx, gw, gb) = conv::backward(inputs[0], inputs[1], grad, needs);
            vec![gx, gw, gb]
        }
        Op::Relu => {
            let x = inputs[0];
            vec![gate(0, &|| {
                let data = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            })]
        }
        Op::BatchNorm { eps } => batchnorm_backward(inputs, saved, grad, needs, *eps)?,
        Op::BatchNormFrozen { eps } => {
            let (_, xhat, inv) = batchnorm_frozen(inputs, *eps)?;
            let x = inputs[0];
            let gamma = inputs[1].data();
            let (channels, inner) = channel_layout(x.shape());
            let mut gx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut dgamma = vec![0.0f64; channels];
            let mut dbeta = vec![0.0f64; channels];
            for (i, &g) in grad.data().iter().enumerate() {
                let c = (i / inner) % channels;
                dgamma[c] += g.as_f64() * xhat[i];
                dbeta[c] += g.as_f64();
                if let Some(gx) = gx.as_mut() {
                    gx.data_mut()[i] = T::from_f64_lossy(g.as_f64() * gamma[c].as_f64() * inv[c]);
                }
            }
            vec![
                gx,
                gate(1, &|| to_tensor(&dgamma)),
                gate(2, &|| to_tensor(&dbeta)),
                None,
                None,
            ]
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let inner: usize = x.shape()[2..].iter().product();
            vec![gate(0, &|| {
                let scale = 1.0 / inner as f64;
                let data = (0..x.numel())
                    .map(|i| T::from_f64_lossy(grad.data()[i / inner].as_f64() * scale))
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            })]
        }
        Op::SoftmaxCrossEntropy { targets } => {
            let Saved::Softmax { probs } = saved else {
                return Err(Error::Contract("softmax state missing".into()));
            };
            let x = inputs[0];
            let (batch, classes) = (x.shape()[0], x.shape()[1]);
            let g = grad.data()[0].as_f64() / batch as f64;
            vec![gate(0, &|| {
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let hit = if targets[i / classes] == i % classes { 1.0 } else { 0.0 };
                        T::from_f64_lossy((p - hit) * g)
                    })
                    .collect();
                Tensor::new([batch, classes], data).expect("same shape")
            })]
        }
        Op::Reshape { .. } => {
            vec![gate(0, &|| {
                grad.reshape(inputs[0].shape().to_vec()).expect("same numel")
            })]
        }
        Op::Sum => {
            let g = grad.data()[0];
            vec![gate(0, &|| Tensor::full(inputs[0].shape().to_vec(), g))]
        }
        Op::Mean => {
            let x = inputs[0];
            let g = T::from_f64_lossy(grad.data()[0].as_f64() / x.numel() as f64);
            vec![gate(0, &|| Tensor::full(x.shape().to_vec(), g))]
        }
        Op::Variance => {
            let x = inputs[0];
            let (mean, _) = mean_var(x.data());
            let scale = 2.0 * grad.data()[0].as_f64() / x.numel() as f64;
            vec![gate(0, &|| x.map(|v| T::from_f64_lossy((v.as_f64() - mean) * scale)))]
        }
        Op::Scale { factor } => {
            let f = T::from_f64_lossy(*factor);
            vec![gate(0, &|| grad.map(|g| g * f))]
        }
    })
}

fn non_empty<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.numel() == 0 {
        Err(Error::shape(op, "empty input"))
    } else {
        Ok(())
    }
}

pub(crate) fn sum_f64<T: Element>(data: &[T]) -> f64 {
    data.iter().map(|v| v.as_f64()).sum()
}

fn mean_var<T: Element>(data: &[T]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = sum_f64(data) / n;
    let var = data
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

fn to_tensor<T: Element>(values: &[f64]) -> Tensor<T> {
    Tensor::from_vec(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
}

fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
        return Err(Error::shape(op, format!("{ash:?} with {bsh:?}")));
    }
    let period = b.numel().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| f(av, b.data()[i % period]))
        .collect();
    Tensor::new(ash.to_vec(), data)
}

/// Sums a flat gradient laid out like the broadcast output down to `shape`.
fn reduce_to<T: Element>(grad: &[T], shape: &[usize]) -> Tensor<T> {
    let period: usize = shape.iter().product();
    let mut acc = vec![0.0f64; period];
    for (i, g) in grad.iter().enumerate() {
        acc[i % period] += g.as_f64();
    }
    Tensor::new(shape.to_vec(), acc.into_iter().map(T::from_f64_lossy).collect()).expect("period matches shape")
}

fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros([m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a.data(), k, 1),
        (b.data(), n, 1),
        T::zero(),
        (out.data_mut(), n, 1),
    );
    Ok(out)
}

/// (channels, elements per channel per batch item)
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    (shape[1], shape[2..].iter().product())
}

fn check_norm_inputs<T: Element>(op: &'static str, inputs: &[&Tensor<T>]) -> Result<usize> {
    let x = inputs[0];
    if x.rank() < 2 {
        return Err(Error::shape(op, format!("input {:?} has no channel axis", x.shape())));
    }
    let c = x.shape()[1];
    for t in &inputs[1..] {
        if t.shape() != [c] {
            return Err(Error::shape(
                op,
                format!("per-channel parameter {:?} for input {:?}", t.shape(), x.shape()),
            ));
        }
    }
    Ok(c)
}

fn batchnorm<T: Element>(inputs: &[&Tensor<T>], eps: f64, keep: bool) -> Result<Forward<T>> {
    let channels = check_norm_inputs("batchnorm", inputs)?;
    let x = inputs[0];
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let inner = channel_layout(x.shape()).1;
    let count = (x.numel() / channels.max(1)) as f64;
    if count == 0.0 {
        return Err(Error::shape("batchnorm", "empty input"));
    }
    let mut mean = vec![0.0f64; channels];
    for (i, v) in x.data().iter().enumerate() {
        mean[(i / inner) % channels] += v.as_f64();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; channels];
    for (i, v) in x.data().iter().enumerate() {
        let c = (i / inner) % channels;
        let d = v.as_f64() - mean[c];
        var[c] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    for (i, v) in x.data().iter().enumerate() {
        let c = (i / inner) % channels;
        let h = (v.as_f64() - mean[c]) * inv[c];
        xhat.push(T::from_f64_lossy(h));
        out.push(T::from_f64_lossy(gamma[c].as_f64() * h + beta[c].as_f64()));
    }
    let saved = Saved::BatchNorm {
        mean,
        var,
        xhat: if keep { xhat } else { Vec::new() },
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, saved))
}

fn batchnorm_backward<T: Element>(
    inputs: &[&Tensor<T>],
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
    eps: f64,
) -> Result<Vec<Option<Tensor<T>>>> {
    let Saved::BatchNorm { var, xhat, .. } = saved else {
        return Err(Error::Contract("batchnorm state missing".into()));
    };
    let x = inputs[0];
    let gamma = inputs[1].data();
    let (channels, inner) = channel_layout(x.shape());
    let count = (x.numel() / channels) as f64;
    let mut sum_g = vec![0.0f64; channels];
    let mut sum_gx = vec![0.0f64; channels];
    for (i, g) in grad.data().iter().enumerate() {
        let c = (i / inner) % channels;
        sum_g[c] += g.as_f64();
        sum_gx[c] += g.as_f64() * xhat[i].as_f64();
    }
    let gx = if needs[0] {
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(x.numel());
        for (i, g) in grad.data().iter().enumerate() {
            let c = (i / inner) % channels;
            let v = gamma[c].as_f64() * inv[c] / count * (count * g.as_f64() - sum_g[c] - xhat[i].as_f64() * sum_gx[c]);
            out.push(T::from_f64_lossy(v));
        }
        Some(Tensor::new(x.shape().to_vec(), out)?)
    } else {
        None
    };
    Ok(vec![
        gx,
        needs[1].then(|| to_tensor(&sum_gx)),
        needs[2].then(|| to_tensor(&sum_g)),
    ])
}

/// Returns (output, xhat as f64, inv_std per channel).
fn batchnorm_frozen<T: Element>(inputs: &[&Tensor<T>], eps: f64) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let channels = check_norm_inputs("batchnorm_frozen", inputs)?;
    let x = inputs[0];
    let (gamma, beta, mean, var) = (inputs[1].data(), inputs[2].data(), inputs[3].data(), inputs[4].data());
    let inner = channel_layout(x.shape()).1;
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    for (i, v) in x.data().iter().enumerate() {
        let c = (i / inner) % channels;
        let h = (v.as_f64() - mean[c].as_f64()) * inv[c];
        xhat.push(h);
        out.push(T::from_f64_lossy(gamma[c].as_f64() * h + beta[c].as_f64()));
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv))
}

fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected (B, C, ...), got {:?}", x.shape()),
        ));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    if inner == 0 {
        return Err(Error::shape("global_avg_pool", "empty pooling window"));
    }
    let data = x
        .data()
        .chunks(inner)
        .map(|chunk| T::from_f64_lossy(sum_f64(chunk) / inner as f64))
        .collect();
    Tensor::new([b, c], data)
}

fn softmax_cross_entropy<T: Element>(x: &Tensor<T>, targets: &[usize]) -> Result<Forward<T>> {
    if x.rank() != 2 || x.shape()[0] != targets.len() || x.shape()[0] == 0 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} with {} targets", x.shape(), targets.len()),
        ));
    }
    let classes = x.shape()[1];
    if let Some(t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("target {t} with {classes} classes"),
        ));
    }
    let mut probs = Vec::with_capacity(x.numel());
    let mut loss = 0.0f64;
    for (row, &t) in x.data().chunks(classes).zip(targets) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - row[t].as_f64();
        probs.extend(exps.iter().map(|e| e / total));
    }
    loss /= targets.len() as f64;
    Ok((Tensor::scalar(T::from_f64_lossy(loss)), Saved::Softmax { probs }))
}
