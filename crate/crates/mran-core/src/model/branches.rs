//! Branch builders: per-source feature extractors and the 1x1-convolution
//! region attention estimators.

use crate::error::Result;
use crate::nn::{BatchNorm, Conv2d, Fwd, Linear, ParamStore};
use crate::tape::{Padding, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::config::{BranchConfig, LayerSpec};

enum FeatLayer {
    Conv { conv: Conv2d, bn: BatchNorm },
    Pool { k: usize, stride: usize },
}

/// Convolutional stack plus a fully connected projection to the source
/// embedding. Convolutions are stride 1 with size-preserving padding,
/// each followed by batch norm and ReLU.
pub struct FeatureBranch {
    layers: Vec<FeatLayer>,
    fc: Linear,
    pub in_side: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl FeatureBranch {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        in_side: usize,
        cfg: &BranchConfig,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut ch = in_channels;
        let mut conv_idx = 0usize;
        for spec in &cfg.layers {
            match spec {
                LayerSpec::Conv { k, filters } => {
                    let name = format!("{prefix}.conv{conv_idx}");
                    let conv = Conv2d::init(store, &name, ch, *filters, *k, 1, Padding::Same, rng);
                    let bn = BatchNorm::init(store, &format!("{prefix}.bn{conv_idx}"), *filters);
                    layers.push(FeatLayer::Conv { conv, bn });
                    ch = *filters;
                    conv_idx += 1;
                }
                LayerSpec::MaxPool { k, stride } => {
                    layers.push(FeatLayer::Pool {
                        k: *k,
                        stride: *stride,
                    });
                }
            }
        }
        let out_side = cfg.out_side(in_side)?;
        let flat = ch * out_side * out_side;
        let fc = Linear::init(store, &format!("{prefix}.fc"), flat, embed_dim, rng);
        Ok(FeatureBranch {
            layers,
            fc,
            in_side,
            in_channels,
            embed_dim,
        })
    }

    /// `[n, c, s, s] -> [n, embed_dim]`.
    pub fn forward(&mut self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &mut self.layers {
            match layer {
                FeatLayer::Conv { conv, bn } => {
                    h = conv.forward(fwd, h)?;
                    h = bn.forward(fwd, h)?;
                    h = fwd.tape.relu(h);
                }
                FeatLayer::Pool { k, stride } => {
                    h = fwd.tape.maxpool2d(h, *k, *stride)?;
                }
            }
        }
        let flat = fwd.tape.flatten(h)?;
        let emb = self.fc.forward(fwd, flat)?;
        Ok(fwd.tape.relu(emb))
    }

    pub fn running_state(&self) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                FeatLayer::Conv { bn, .. } => bn.running_state(),
                FeatLayer::Pool { .. } => Vec::new(),
            })
            .collect()
    }

    pub fn load_running_state(&mut self, name: &str, t: &Tensor) -> Result<bool> {
        for layer in &mut self.layers {
            if let FeatLayer::Conv { bn, .. } = layer {
                if bn.load_running_state(name, t)? {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Filter counts of the four 1x1 convolutions in the attention estimator.
pub const ATTENTION_FILTERS: [usize; 4] = [32, 16, 4, 1];
/// Width of the hidden fully connected layer after the 1x1 stack.
pub const ATTENTION_FC_HIDDEN: usize = 16;

/// Region attention estimator: four 1x1 convolutions (32, 16, 4, 1 filters)
/// over region pixels carrying the replicated reference feature, flattened
/// into two fully connected layers (16 then 1) that emit a raw score.
/// Normalizing the scores with an exponential (softmax over a source's
/// proposals) yields the non-negative attention weights.
pub struct AttentionBranch {
    convs: Vec<(Conv2d, BatchNorm)>,
    fc_hidden: Linear,
    fc_out: Linear,
    pub in_side: usize,
}

impl AttentionBranch {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        in_side: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut ch = in_channels;
        for (i, &filters) in ATTENTION_FILTERS.iter().enumerate() {
            let conv = Conv2d::init(
                store,
                &format!("{prefix}.conv{i}"),
                ch,
                filters,
                1,
                1,
                Padding::Same,
                rng,
            );
            let bn = BatchNorm::init(store, &format!("{prefix}.bn{i}"), filters);
            convs.push((conv, bn));
            ch = filters;
        }
        let flat = in_side * in_side;
        let fc_hidden = Linear::init(store, &format!("{prefix}.fc0"), flat, ATTENTION_FC_HIDDEN, rng);
        let fc_out = Linear::init(store, &format!("{prefix}.fc1"), ATTENTION_FC_HIDDEN, 1, rng);
        Ok(AttentionBranch {
            convs,
            fc_hidden,
            fc_out,
            in_side,
        })
    }

    /// `[n, c + d, s, s] -> [n, 1]` raw attention logits.
    pub fn forward(&mut self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &mut self.convs {
            h = conv.forward(fwd, h)?;
            h = bn.forward(fwd, h)?;
            h = fwd.tape.relu(h);
        }
        let flat = fwd.tape.flatten(h)?;
        let hid = self.fc_hidden.forward(fwd, flat)?;
        let hid = fwd.tape.relu(hid);
        self.fc_out.forward(fwd, hid)
    }

    pub fn running_state(&self) -> Vec<(String, Tensor)> {
        self.convs.iter().flat_map(|(_, bn)| bn.running_state()).collect()
    }

    pub fn load_running_state(&mut self, name: &str, t: &Tensor) -> Result<bool> {
        for (_, bn) in &mut self.convs {
            if bn.load_running_state(name, t)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}
