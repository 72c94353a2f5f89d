use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BlockCache, BranchPass, CnNets, ConvLayer, ForwardPass};
use crate::error::{Error, Result};
use crate::nn::{
    batch_norm_backward, conv2d_backward_impl, gap_backward, maxpool2_backward, relu_backward, sgd_update,
    softmax_ce_backward, softmax_ce_forward, Phase,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "epochs, batch size and learning rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One labelled training image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
}

/// Per-epoch training curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean summed (conv + norm) cross-entropy over each epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy of the combined scores during each epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Which branch losses drive a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossBranches {
    Both,
    ConvOnly,
    NormOnly,
}

pub(crate) struct HeadGradients {
    pub loss: f64,
    /// `dl/d` pooled maps of each branch; zero when the branch is not trained.
    pub conv_pooled: Tensor,
    pub norm_pooled: Tensor,
}

pub(crate) fn head_gradients(pass: &ForwardPass, labels: &[usize], which: LossBranches) -> Result<HeadGradients> {
    let [_, _, h, w] = pass.conv.pooled_maps.dims4()?;
    let mut loss = 0.0;
    let mut branch = |bp: &BranchPass, active: bool| -> Result<Tensor> {
        if !active {
            return Ok(Tensor::zeros(bp.pooled_maps.shape()));
        }
        loss += softmax_ce_forward(&bp.scores, labels)?;
        gap_backward(&softmax_ce_backward(&bp.scores, labels)?, h, w)
    };
    let conv_pooled = branch(&pass.conv, which != LossBranches::NormOnly)?;
    let norm_pooled = branch(&pass.norm, which != LossBranches::ConvOnly)?;
    Ok(HeadGradients {
        loss,
        conv_pooled,
        norm_pooled,
    })
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Backpropagates through `conv -> relu -> maxpool` blocks in reverse order.
/// Gradients are pushed in reverse layer order as `[weights, bias]` pairs.
fn blocks_backward(
    layers: &[ConvLayer],
    caches: &[BlockCache],
    mut upstream: Tensor,
    need_input_grad: bool,
    out: &mut Vec<Vec<f64>>,
) -> Result<Option<Tensor>> {
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let g = maxpool2_backward(&cache.post_relu, &upstream)?;
        let g = relu_backward(&cache.pre_relu, &g)?;
        let want_input = need_input_grad || i > 0;
        let (gin, gw, gb) = conv2d_backward_impl(&cache.input, &layer.weights, &g, layer.bias.len(), want_input)?;
        out.push(gb.into_data());
        out.push(gw.into_data());
        match gin {
            Some(t) => upstream = t,
            None => return Ok(None),
        }
    }
    Ok(Some(upstream))
}

struct BranchGrads {
    /// Declaration order: tail layers then head, each `[weights, bias]`.
    params: Vec<Vec<f64>>,
    trunk: Tensor,
    gamma_beta: Option<(Vec<f64>, Vec<f64>)>,
}

fn branch_backward(net: &CnNets, branch: &super::Branch, pass: &BranchPass, pooled_grad: Tensor) -> Result<BranchGrads> {
    let (maps_grad, gamma_beta) = match &pass.bn_cache {
        Some(cache) => {
            let g = batch_norm_backward(cache, &net.bn, &pooled_grad)?;
            let mut p = g.params.into_iter();
            let gamma = p.next().expect("gamma grad").into_data();
            let beta = p.next().expect("beta grad").into_data();
            (g.input, Some((gamma, beta)))
        }
        None => (pooled_grad, None),
    };
    let (feat_grad, head_w, head_b) =
        conv2d_backward_impl(&pass.features, &branch.head.weights, &maps_grad, branch.head.bias.len(), true)?;
    let mut rev = Vec::new();
    let trunk = if branch.tail.is_empty() {
        feat_grad.expect("requested")
    } else {
        blocks_backward(&branch.tail, &pass.blocks, feat_grad.expect("requested"), true, &mut rev)?
            .expect("requested")
    };
    rev.reverse(); // -> weights, bias per layer in forward order
    let mut params = rev;
    params.push(head_w.into_data());
    params.push(head_b.into_data());
    Ok(BranchGrads {
        params,
        trunk,
        gamma_beta,
    })
}

impl CnNets {
    /// Full gradient in [`CnNets::param_slices`] order, plus the batch loss.
    pub(crate) fn gradients(
        &self,
        pass: &ForwardPass,
        labels: &[usize],
        which: LossBranches,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let heads = head_gradients(pass, labels, which)?;
        let conv = branch_backward(self, &self.conv, &pass.conv, heads.conv_pooled)?;
        let norm = branch_backward(self, &self.norm, &pass.norm, heads.norm_pooled)?;

        let mut trunk_grad = conv.trunk;
        add_into(&mut trunk_grad, &norm.trunk);
        let mut shared_rev = Vec::new();
        if !self.shared.is_empty() {
            blocks_backward(&self.shared, &pass.shared, trunk_grad, false, &mut shared_rev)?;
        }
        shared_rev.reverse();

        let mut all = shared_rev;
        all.extend(conv.params);
        all.extend(norm.params);
        let (gamma, beta) = norm.gamma_beta.expect("normalized branch has a BN cache");
        all.push(gamma);
        all.push(beta);
        Ok((heads.loss, all))
    }

    /// Summed branch cross-entropy of a train-phase pass and its gradient in
    /// [`CnNets::param_slices`] order. Running statistics are left untouched.
    pub fn loss_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let pass = self.forward_pass(batch, Phase::Train, true)?;
        self.gradients(&pass, labels, LossBranches::Both)
    }

    /// One SGD step on a batch. Returns the batch loss and the number of
    /// correct combined predictions.
    pub fn train_step(&mut self, batch: &Tensor, labels: &[usize], lr: f64, which: LossBranches) -> Result<(f64, usize)> {
        let pass = self.forward_pass(batch, Phase::Train, true)?;
        let (loss, grads) = self.gradients(&pass, labels, which)?;
        let correct = count_correct(&pass.conv.scores, &pass.norm.scores, labels);
        for (p, g) in self.param_slices_mut().into_iter().zip(&grads) {
            sgd_update(p, g, lr)?;
        }
        if let Some(cache) = &pass.norm.bn_cache {
            self.bn.absorb_batch(cache);
        }
        Ok((loss, correct))
    }

    /// Minimizes the summed branch cross-entropies with mini-batch SGD.
    ///
    /// Sample order is reshuffled every epoch from `tc.seed`, so identical
    /// inputs give bit-identical parameters.
    pub fn train(&mut self, samples: &[Sample], tc: &TrainConfig) -> Result<TrainReport> {
        tc.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let c = self.config.num_species;
        if let Some(bad) = samples.iter().find(|s| s.label >= c) {
            return Err(Error::Data(format!(
                "record {} has species label {} outside [0, {c})",
                bad.id, bad.label
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut report = TrainReport::default();
        for epoch in 0..tc.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for chunk in order.chunks(tc.batch_size) {
                let images: Vec<Tensor> = chunk.iter().map(|&i| samples[i].image.clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
                let batch = Tensor::stack(&images)?;
                let (loss, ok) = self.train_step(&batch, &labels, tc.learning_rate, LossBranches::Both)?;
                loss_sum += loss * chunk.len() as f64;
                correct += ok;
            }
            let loss = loss_sum / samples.len() as f64;
            if !loss.is_finite() {
                return Err(Error::contract(format!("training diverged at epoch {epoch}")));
            }
            log::debug!("epoch {epoch}: loss {loss:.5}, acc {:.3}", correct as f64 / samples.len() as f64);
            report.epoch_loss.push(loss);
            report.epoch_accuracy.push(correct as f64 / samples.len() as f64);
        }
        Ok(report)
    }
}

fn count_correct(conv: &Tensor, norm: &Tensor, labels: &[usize]) -> usize {
    let classes = conv.shape()[1];
    conv.data()
        .chunks_exact(classes)
        .zip(norm.data().chunks_exact(classes))
        .zip(labels)
        .filter(|((a, b), &label)| {
            let combined: Vec<f64> = a.iter().zip(*b).map(|(x, y)| (x + y) / 2.0).collect();
            argmax(&combined) == label
        })
        .count()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
