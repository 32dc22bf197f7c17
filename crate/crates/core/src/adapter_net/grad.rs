use crate::error::{Error, Result};
use crate::numerics::FlatParams;

use super::loss::{bce_with_grad, low_layer_count, neg_cosine_with_grad, Batch};
use super::model::{Matrix, ToyFM};

/// Gradient buffers for one adapter layer.
struct AdapterGrad {
    down: Matrix,
    up: Matrix,
}

/// Activations cached by the forward pass of one stage.
struct StageCache {
    /// relu(W h + b): adapter input
    block_out: Vec<f64>,
    /// down * block_out, before relu
    down_pre: Vec<f64>,
    /// relu(down_pre)
    hidden: Vec<f64>,
}

/// Objective value and gradient in one pass.
pub struct ObjectiveGrad {
    pub seg_loss: f64,
    pub reg_loss: f64,
    pub value: f64,
    pub grad: FlatParams,
}

/// Gradient of the training objective with respect to every adapter
/// parameter (layers `1..=K`). Frozen blocks and the head get none.
pub fn grad_adapters(batch: &Batch, m: &ToyFM, theta_ref: &FlatParams, beta: f64) -> Result<FlatParams> {
    Ok(objective_and_grad(batch, m, theta_ref, beta)?.grad)
}

/// Reverse-mode pass over the batch. Per sample and stage:
///
/// ```text
/// z = W h + b,  a = relu(z),  u = D a,  r = relu(u),  h' = U r + a
/// ```
///
/// and `logits = H h_K + c`, with the per-pixel loss averaged over pixels
/// and samples.
pub fn objective_and_grad(batch: &Batch, m: &ToyFM, theta_ref: &FlatParams, beta: f64) -> Result<ObjectiveGrad> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let layers = low_layer_count(m, theta_ref)?;
    let dims = m.dims();
    let (f, bdim) = (dims.feature_dim, dims.bottleneck_dim);
    let backbone = m.backbone();
    let adapters = m.adapters();

    let mut grads: Vec<AdapterGrad> = (0..dims.blocks)
        .map(|_| AdapterGrad {
            down: Matrix::zeros(bdim, f),
            up: Matrix::zeros(f, bdim),
        })
        .collect();

    let scale = 1.0 / (batch.len() * f) as f64;
    let mut seg_total = 0.0;
    let mut caches: Vec<StageCache> = Vec::with_capacity(dims.blocks);
    let mut g_h = vec![0.0; f];
    let mut g_z = vec![0.0; f];
    let mut g_hidden = vec![0.0; bdim];

    for (x, y) in batch.iter() {
        if x.len() != f || y.len() != f {
            return Err(Error::invalid("batch sample width does not match feature_dim"));
        }
        caches.clear();
        let mut h = x.to_vec();
        for (block, adapter) in backbone.blocks().iter().zip(adapters) {
            let mut block_out = block.weight.matvec(&h);
            block_out
                .iter_mut()
                .zip(&block.bias)
                .for_each(|(v, b)| *v = (*v + b).max(0.0));
            let down_pre = adapter.down_proj.matvec(&block_out);
            let hidden: Vec<f64> = down_pre.iter().map(|v| v.max(0.0)).collect();
            adapter.up_proj.matvec_into(&hidden, &mut h);
            h.iter_mut().zip(&block_out).for_each(|(o, a)| *o += a);
            caches.push(StageCache {
                block_out,
                down_pre,
                hidden,
            });
        }
        let head = backbone.head();
        let mut logits = head.weight.matvec(&h);
        let mut g_logits = vec![0.0; f];
        for ((l, b), (t, g)) in logits
            .iter_mut()
            .zip(&head.bias)
            .zip(y.iter().zip(g_logits.iter_mut()))
        {
            *l += b;
            let (loss, dl) = bce_with_grad(*l, *t);
            seg_total += loss;
            *g = dl * scale;
        }

        head.weight.matvec_transposed_into(&g_logits, &mut g_h);
        for k in (0..dims.blocks).rev() {
            let cache = &caches[k];
            let adapter = &adapters[k];
            let grad = &mut grads[k];
            // h' = U r + a
            grad.up.add_outer(&g_h, &cache.hidden, 1.0);
            adapter.up_proj.matvec_transposed_into(&g_h, &mut g_hidden);
            g_hidden
                .iter_mut()
                .zip(&cache.down_pre)
                .for_each(|(g, u)| if *u <= 0.0 { *g = 0.0 });
            grad.down.add_outer(&g_hidden, &cache.block_out, 1.0);
            if k == 0 {
                break;
            }
            // g_a = g_h + D^T g_hidden, then through relu(W h + b)
            adapter.down_proj.matvec_transposed_into(&g_hidden, &mut g_z);
            g_z.iter_mut()
                .zip(&g_h)
                .zip(&cache.block_out)
                .for_each(|((gz, gh), a)| *gz = if *a > 0.0 { *gz + gh } else { 0.0 });
            backbone.blocks()[k].weight.matvec_transposed_into(&g_z, &mut g_h);
        }
    }

    let mut values = Vec::with_capacity(dims.blocks * dims.adapter_len());
    for g in &grads {
        values.extend_from_slice(g.down.as_slice());
        values.extend_from_slice(g.up.as_slice());
    }

    let seg_loss = seg_total * scale;
    let mut reg_loss = 0.0;
    if beta > 0.0 {
        let low = m.low_params(layers)?;
        let (r, reg_grad) = neg_cosine_with_grad(low.values(), theta_ref.values(), true)?;
        reg_loss = r;
        values.iter_mut().zip(&reg_grad).for_each(|(v, g)| *v += beta * g);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("adapter gradient entry {i} is not finite")));
    }
    let grad = FlatParams::new(values, dims.manifest(dims.blocks))?;
    Ok(ObjectiveGrad {
        seg_loss,
        reg_loss,
        value: seg_loss + beta * reg_loss,
        grad,
    })
}
