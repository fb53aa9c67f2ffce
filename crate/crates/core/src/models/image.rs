//! Small CNN: `conv -> activation -> pool` blocks, then two dense layers.

use super::{Activation, ImageConfig, Layer, ModelConfig, ParamRole, Pooling, INPUT, LOGITS, LOSS, TARGET};
use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeId};

const POOL: usize = 2;

/// Spatial size after the conv stack (padding keeps size; each pool halves).
fn feature_dims(c: &ImageConfig) -> (usize, usize, usize) {
    let (mut h, mut w) = (c.height, c.width);
    for _ in &c.conv_channels {
        h /= POOL;
        w /= POOL;
    }
    (*c.conv_channels.last().expect("validated"), h, w)
}

pub(super) fn layers(c: &ImageConfig, classes: usize) -> Vec<Layer> {
    let mut out = Vec::new();
    let mut in_ch = c.channels;
    let k = c.kernel;
    for (i, &oc) in c.conv_channels.iter().enumerate() {
        let mut l = Layer::new(format!("conv{}", i + 1));
        l.push(
            "weight",
            &[oc, in_ch, k, k],
            ParamRole::Weight {
                fan_in: in_ch * k * k,
                fan_out: oc * k * k,
            },
        );
        l.push("bias", &[oc], ParamRole::Bias);
        out.push(l);
        in_ch = oc;
    }
    let (fc, fh, fw) = feature_dims(c);
    let flat = fc * fh * fw;
    let mut fc1 = Layer::new("fc1");
    fc1.push(
        "weight",
        &[flat, c.hidden],
        ParamRole::Weight {
            fan_in: flat,
            fan_out: c.hidden,
        },
    );
    fc1.push("bias", &[c.hidden], ParamRole::Bias);
    out.push(fc1);
    let mut fc2 = Layer::new("fc2");
    fc2.push(
        "weight",
        &[c.hidden, classes],
        ParamRole::Weight {
            fan_in: c.hidden,
            fan_out: classes,
        },
    );
    fc2.push("bias", &[classes], ParamRole::Bias);
    out.push(fc2);
    out
}

pub(super) fn activate(b: &mut GraphBuilder, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Relu => Ok(b.relu(x)),
        Activation::Softplus { beta } => b.softplus(x, beta),
    }
}

pub(super) fn dense(b: &mut GraphBuilder, x: NodeId, name: &str, fan_in: usize, fan_out: usize) -> Result<NodeId> {
    let w = b.param(&format!("{name}.weight"), &[fan_in, fan_out])?;
    let bias = b.param(&format!("{name}.bias"), &[fan_out])?;
    let y = b.matmul(x, w)?;
    b.add_bias(y, bias)
}

pub(super) fn graph(c: &ImageConfig, cfg: &ModelConfig) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let mut h = b.input(INPUT, &[c.channels, c.height, c.width])?;
    let mut in_ch = c.channels;
    for (i, &oc) in c.conv_channels.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let w = b.param(&format!("{name}.weight"), &[oc, in_ch, c.kernel, c.kernel])?;
        let bias = b.param(&format!("{name}.bias"), &[oc])?;
        h = b.conv2d(h, w, bias, 1, c.kernel / 2)?;
        h = activate(&mut b, h, cfg.activation)?;
        h = match cfg.pooling {
            Pooling::Max => b.max_pool2d(h, POOL, POOL)?,
            Pooling::Lse { temperature } => b.lse_pool2d(h, POOL, POOL, temperature)?,
        };
        in_ch = oc;
    }
    let (fc, fh, fw) = feature_dims(c);
    let flat = fc * fh * fw;
    let v = b.reshape(h, &[1, flat])?;
    let hid = dense(&mut b, v, "fc1", flat, c.hidden)?;
    let hid = activate(&mut b, hid, cfg.activation)?;
    let out = dense(&mut b, hid, "fc2", c.hidden, cfg.num_classes)?;
    let logits = b.reshape(out, &[cfg.num_classes])?;
    let target = b.input(TARGET, &[cfg.num_classes])?;
    let loss = b.cross_entropy(logits, target)?;
    b.output(LOGITS, logits);
    b.output(LOSS, loss);
    Ok(b.build())
}
