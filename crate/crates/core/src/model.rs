//! The full classifier: region embedding, `L` attention blocks and a
//! class-token readout, trained with cross-entropy.

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_forward, init_block, AttentionVariant, BlockNames, BlockShape, KeySet, MaskSet,
    TokenGrid, INIT_STD, LAYER_NORM_EPS,
};
use crate::error::{EetError, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{log_softmax_nll, Graph, Var};
use crate::layout::{embed_in_graph, patchify, Feature4D};
use crate::params::{BoundParams, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EetConfig {
    pub variant: AttentionVariant,
    /// Number of attention blocks `L`.
    pub blocks: usize,
    /// Token width `D`.
    pub width: usize,
    /// Attention heads `A`.
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Region side `P`.
    pub region_side: usize,
    /// Grid rows `V`.
    pub grid_rows: usize,
    /// Grid columns `H`.
    pub grid_cols: usize,
    /// Seconds per sample `T`.
    pub seconds: usize,
    pub bands: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for EetConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Joint,
            blocks: 4,
            width: 64,
            heads: 4,
            mlp_hidden: 256,
            region_side: 2,
            grid_rows: 8,
            grid_cols: 8,
            seconds: 10,
            bands: 5,
            classes: 3,
            seed: 0,
        }
    }
}

impl EetConfig {
    /// Four regions over two seconds, `D = 8`, two heads, one block.
    pub fn toy(variant: AttentionVariant) -> Self {
        Self {
            variant,
            blocks: 1,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            region_side: 2,
            grid_rows: 4,
            grid_cols: 4,
            seconds: 2,
            bands: 5,
            classes: 3,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(EetError::config("at least one attention block is required"));
        }
        if self.classes < 2 {
            return Err(EetError::config("at least two classes are required"));
        }
        if self.seconds == 0 || self.bands == 0 {
            return Err(EetError::config("seconds and bands must be positive"));
        }
        if self.region_side == 0
            || !self.grid_rows.is_multiple_of(self.region_side)
            || !self.grid_cols.is_multiple_of(self.region_side)
        {
            return Err(EetError::config(format!(
                "region side {} does not divide the {}×{} grid",
                self.region_side, self.grid_rows, self.grid_cols
            )));
        }
        self.block_shape().validate()
    }

    /// Regions per second, `G = VH/P²`.
    pub fn regions(&self) -> usize {
        (self.grid_rows * self.grid_cols) / (self.region_side * self.region_side)
    }

    pub fn tokens(&self) -> usize {
        self.regions() * self.seconds + 1
    }

    pub fn region_width(&self) -> usize {
        self.bands * self.region_side * self.region_side
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid::new(self.regions(), self.seconds)
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            variant: self.variant,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.seconds, self.bands, self.grid_rows, self.grid_cols]
    }
}

fn block_names(l: usize) -> BlockNames {
    BlockNames::new(format!("block{l}"))
}

/// Every learnable weight of the model, named (see [`BlockNames`] for blocks):
/// `embed.m` (`D × S·P²`), `embed.pos` (`(G·T+1) × D`), `embed.cls` (`1 × D`),
/// `block{l}.*`, `final_ln.{gamma,beta}`, `head.w` (`K × D`), `head.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct EetParams {
    config: EetConfig,
    params: ParamSet,
}

impl EetParams {
    /// Fresh parameters from the config's seed. Attention and MLP weights are
    /// `N(0, 0.02²)`, the positional table and classifier head start at zero.
    pub fn init(config: &EetConfig) -> Result<Self> {
        Self::init_with_seed(config, config.seed)
    }

    pub fn init_with_seed(config: &EetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let d = config.width;
        let mut p = ParamSet::new();
        p.insert(
            "embed.m",
            Tensor::randn(&[d, config.region_width()], INIT_STD, &mut rng),
        );
        p.insert("embed.pos", Tensor::zeros(&[config.tokens(), d]));
        p.insert("embed.cls", Tensor::randn(&[1, d], INIT_STD, &mut rng));
        for l in 0..config.blocks {
            init_block(&mut p, &block_names(l), &config.block_shape(), &mut rng)?;
        }
        p.insert("final_ln.gamma", Tensor::ones(&[d]));
        p.insert("final_ln.beta", Tensor::zeros(&[d]));
        p.insert("head.w", Tensor::zeros(&[config.classes, d]));
        p.insert("head.b", Tensor::zeros(&[config.classes]));
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Wraps existing tensors after checking names and shapes against `config`.
    pub fn from_parts(config: EetConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::init_with_seed(&config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(EetError::config(
                "parameter names or shapes do not match the configuration",
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

/// One attention matrix produced during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub stage: usize,
    pub key_set: KeySet,
    pub head: usize,
    pub weights: Var,
}

pub struct ForwardTrace {
    pub logits: Var,
    pub attention: Vec<AttentionRecord>,
}

fn check_input(config: &EetConfig, x: &Feature4D) -> Result<()> {
    if x.shape() != config.input_shape() {
        return Err(EetError::config(format!(
            "input shape {:?} does not match configured {:?}",
            x.shape(),
            config.input_shape()
        )));
    }
    Ok(())
}

/// Records the forward pass on `graph` with parameters already bound to it.
pub fn forward_in_graph(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &EetConfig,
    x: &Feature4D,
) -> Result<ForwardTrace> {
    check_input(config, x)?;
    let regions = patchify(x, config.region_side)?;
    let input = graph.constant(regions.vectors().clone());
    let mut z = embed_in_graph(
        graph,
        input,
        bound.var("embed.m")?,
        bound.var("embed.pos")?,
        bound.var("embed.cls")?,
    )?;
    let masks = MaskSet::new(config.grid());
    let shape = config.block_shape();
    let mut attention = Vec::new();
    for l in 0..config.blocks {
        let out = block_forward(graph, z, bound, &block_names(l), &shape, &masks)?;
        attention.extend(out.attention.into_iter().map(|a| AttentionRecord {
            block: l,
            stage: a.stage,
            key_set: a.key_set,
            head: a.head,
            weights: a.weights,
        }));
        z = out.tokens;
    }
    let class = graph.slice_rows(z, 0, 1)?;
    let normed = graph.layer_norm(
        class,
        bound.var("final_ln.gamma")?,
        bound.var("final_ln.beta")?,
        LAYER_NORM_EPS,
    )?;
    let logits = graph.matmul_nt(normed, bound.var("head.w")?)?;
    let logits = graph.add_row(logits, bound.var("head.b")?)?;
    Ok(ForwardTrace { logits, attention })
}

/// Class logits for one input.
pub fn forward(params: &EetParams, x: &Feature4D) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.params.bind(&mut g);
    let trace = forward_in_graph(&mut g, &bound, &params.config, x)?;
    Ok(g.value(trace.logits).data().to_vec())
}

/// Cross-entropy loss, logits and parameter gradients for one labelled input.
pub fn loss_and_gradients(
    params: &EetParams,
    x: &Feature4D,
    label: usize,
) -> Result<(f64, Vec<f64>, ParamSet)> {
    loss_and_gradients_in(Graph::new(), params, x, label)
}

/// As [`loss_and_gradients`], recording on the supplied graph.
pub fn loss_and_gradients_in(
    mut g: Graph,
    params: &EetParams,
    x: &Feature4D,
    label: usize,
) -> Result<(f64, Vec<f64>, ParamSet)> {
    if label >= params.config.classes {
        return Err(EetError::contract(format!(
            "label {label} out of range 0..{}",
            params.config.classes
        )));
    }
    let bound = params.params.bind(&mut g);
    let trace = forward_in_graph(&mut g, &bound, &params.config, x)?;
    let loss = g.cross_entropy(trace.logits, label)?;
    let value = g.value(loss).item();
    let logits = g.value(trace.logits).data().to_vec();
    let grads = bound.gradients(&params.params, g.backward(loss)?);
    Ok((value, logits, grads))
}

/// `−log softmax(logits)[label]` by log-sum-exp; never negative.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(EetError::contract(format!(
            "label {label} out of range 0..{}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(EetError::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(log_softmax_nll(logits, label).0)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Dense attention matrix of one (block, stage, head).
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub block: usize,
    pub stage: usize,
    pub key_set: KeySet,
    pub head: usize,
    pub weights: Tensor,
}

/// Every attention matrix of a forward pass over `x`.
pub fn attention_maps(params: &EetParams, x: &Feature4D) -> Result<Vec<AttentionMap>> {
    let mut g = Graph::new();
    let bound = params.params.bind(&mut g);
    let trace = forward_in_graph(&mut g, &bound, &params.config, x)?;
    Ok(trace
        .attention
        .iter()
        .map(|a| AttentionMap {
            block: a.block,
            stage: a.stage,
            key_set: a.key_set,
            head: a.head,
            weights: g.value(a.weights).clone(),
        })
        .collect())
}

/// Initial parameters plus `N(0, std²)` noise on every tensor, so that
/// zero-initialized tensors take generic values.
pub fn perturbed_params(config: &EetConfig, seed: u64, std: f64) -> Result<EetParams> {
    let mut p = EetParams::init_with_seed(config, seed)?;
    let mut noise_rng = rng::stream(seed, "perturb");
    for (_, t) in p.params_mut().iter_mut() {
        let noise = Tensor::randn(t.shape(), std, &mut noise_rng);
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(p)
}

/// Compares analytic gradients of the full model against central
/// differences on one random input drawn from `seed`.
pub fn check_model_gradients(
    config: &EetConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = perturbed_params(config, seed, 0.3)?;
    let [t, s, v, h] = config.input_shape();
    let mut input_rng = rng::stream(seed, "gradcheck/input");
    let x = Feature4D::new(
        t,
        s,
        v,
        h,
        Tensor::randn(&[t * s * v * h], 1.0, &mut input_rng).into_data(),
    )?;
    let label = (seed % config.classes as u64) as usize;
    let (_, _, analytic) = loss_and_gradients(&params, &x, label)?;
    grad_check(
        |q| {
            let candidate = EetParams::from_parts(config.clone(), q.clone())?;
            cross_entropy(&forward(&candidate, &x)?, label)
        },
        &analytic,
        params.params(),
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(config: &EetConfig, seed: u64) -> Feature4D {
        let [t, s, v, h] = config.input_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature4D::new(
            t,
            s,
            v,
            h,
            Tensor::randn(&[t * s * v * h], 1.0, &mut rng).into_data(),
        )
        .unwrap()
    }

    fn randomized(config: &EetConfig, seed: u64) -> EetParams {
        let mut p = EetParams::init(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in p.params_mut().iter_mut() {
            let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
        }
        p
    }

    #[test]
    fn three_classes_give_three_logits() {
        let config = EetConfig::toy(AttentionVariant::Joint);
        let p = randomized(&config, 1);
        assert_eq!(forward(&p, &random_input(&config, 2)).unwrap().len(), 3);
    }

    #[test]
    fn dead_network_returns_bias() {
        let config = EetConfig::toy(AttentionVariant::Divided);
        let mut p = EetParams::init(&config).unwrap();
        for (_, t) in p.params_mut().iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let bias = [0.5, -1.25, 2.0];
        p.params_mut()
            .insert("head.b", Tensor::new(vec![3], bias.to_vec()).unwrap());
        for seed in 0..3 {
            assert_eq!(forward(&p, &random_input(&config, seed)).unwrap(), bias);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let config = EetConfig::toy(AttentionVariant::Spatial);
        let p = randomized(&config, 3);
        let x = random_input(&config, 4);
        let a = forward(&p, &x).unwrap();
        let b = forward(&p, &x).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn wrong_input_shape_is_config_error() {
        let config = EetConfig::toy(AttentionVariant::Joint);
        let p = EetParams::init(&config).unwrap();
        let other = EetConfig {
            seconds: 3,
            ..config
        };
        assert!(matches!(
            forward(&p, &random_input(&other, 0)),
            Err(EetError::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = EetConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(
            (ok.regions(), ok.tokens(), ok.region_width()),
            (16, 161, 20)
        );
        for bad in [
            EetConfig {
                heads: 3,
                ..ok.clone()
            },
            EetConfig {
                region_side: 3,
                ..ok.clone()
            },
            EetConfig {
                blocks: 0,
                ..ok.clone()
            },
            EetConfig {
                classes: 1,
                ..ok.clone()
            },
            EetConfig {
                seconds: 0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(EetError::Config(_))));
        }
    }

    #[test]
    fn from_parts_checks_layout() {
        let config = EetConfig::toy(AttentionVariant::Joint);
        let p = EetParams::init(&config).unwrap();
        let other = EetConfig::toy(AttentionVariant::Divided);
        assert!(EetParams::from_parts(other, p.params().clone()).is_err());
        assert!(EetParams::from_parts(config, p.into_params()).is_ok());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        assert!((cross_entropy(&[0.7; 3], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates() {
        assert!(cross_entropy(&[30.0, -30.0], 0).unwrap() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(EetError::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 2..7 {
            let logits = Tensor::randn(&[k], 3.0, &mut rng).into_data();
            for label in 0..k {
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                let direct = -(logits[label].exp() / z).ln();
                assert!((cross_entropy(&logits, label).unwrap() - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predict_picks_argmax_with_low_tie_break() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict(&[0.4, 0.4, 0.4]), 0);
        assert_eq!(predict(&[0.0, 2.0, 2.0]), 1);
    }

    proptest! {
        #[test]
        fn predict_is_invariant_under_increasing_maps(logits in prop::collection::vec(-20.0f64..20.0, 2..8)) {
            let before = predict(&logits);
            let exp: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let z: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|v| v / z).collect();
            let cubic: Vec<f64> = logits.iter().map(|v| v * v * v + 2.0 * v).collect();
            prop_assert_eq!(predict(&exp), before);
            prop_assert_eq!(predict(&probs), before);
            prop_assert_eq!(predict(&cubic), before);
        }

        #[test]
        fn cross_entropy_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 2..6), pick in 0usize..6) {
            let label = pick % logits.len();
            prop_assert!(cross_entropy(&logits, label).unwrap() >= 0.0);
        }
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        let config = EetConfig::toy(AttentionVariant::Temporal);
        let p = randomized(&config, 6);
        let x = random_input(&config, 7);
        let (_, logits, grads) = loss_and_gradients(&p, &x, 2).unwrap();
        let probs = crate::tensor::softmax(&Tensor::new(vec![3], logits).unwrap(), 0).unwrap();
        let gb = grads.get("head.b").unwrap();
        for c in 0..3 {
            let want = probs.data()[c] - if c == 2 { 1.0 } else { 0.0 };
            assert!((gb.data()[c] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_model_gradient_matches_finite_differences() {
        for variant in AttentionVariant::ALL {
            let config = EetConfig::toy(variant);
            let p = randomized(&config, 8);
            let x = random_input(&config, 9);
            let (_, _, analytic) = loss_and_gradients(&p, &x, 1).unwrap();
            let report = grad_check(
                |q| {
                    let candidate = EetParams::from_parts(config.clone(), q.clone())?;
                    cross_entropy(&forward(&candidate, &x)?, 1)
                },
                &analytic,
                p.params(),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{variant}: {report:?}");
        }
    }

    /// With one block the class token reads the same keys in every variant,
    /// so a second block is what exercises the masked paths end to end.
    #[test]
    fn two_block_gradients_match_and_variants_differ() {
        let mut logits = Vec::new();
        for variant in AttentionVariant::ALL {
            let config = EetConfig {
                blocks: 2,
                seconds: 3,
                ..EetConfig::toy(variant)
            };
            let report = check_model_gradients(&config, 4, &GradCheckOptions::default()).unwrap();
            assert!(report.passed, "{variant}: {report:?}");
            // Single-stage variants share one parameter layout.
            if variant != AttentionVariant::Divided {
                let joint = EetConfig {
                    variant: AttentionVariant::Joint,
                    ..config.clone()
                };
                let shared = perturbed_params(&joint, 4, 0.3).unwrap().into_params();
                let p = EetParams::from_parts(config.clone(), shared).unwrap();
                logits.push(forward(&p, &random_input(&config, 5)).unwrap());
            }
        }
        for i in 1..logits.len() {
            assert!(logits[0]
                .iter()
                .zip(&logits[i])
                .any(|(a, b)| (a - b).abs() > 1e-6));
        }
    }

    #[test]
    fn attention_maps_cover_every_block_stage_and_head() {
        let config = EetConfig {
            blocks: 2,
            ..EetConfig::toy(AttentionVariant::Divided)
        };
        let p = randomized(&config, 10);
        let maps = attention_maps(&p, &random_input(&config, 11)).unwrap();
        assert_eq!(maps.len(), 2 * 2 * 2);
        assert!(maps
            .iter()
            .all(|m| m.weights.shape() == [config.tokens(), config.tokens()]));
    }
}
