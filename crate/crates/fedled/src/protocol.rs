//! The federated training protocol: two agents that own private feature
//! extractors, and a coordinator that owns the shared classifier and the
//! domain discriminator.
//!
//! Each round is a fixed four-message exchange. Both agents push one batch
//! of latent features up (the source's with labels); the coordinator
//! builds the full objective over the received latents, updates its own
//! networks, and returns the gradient at each agent's latents together
//! with the refreshed classifier. Agents finish the chain rule locally and
//! update their extractors. Raw inputs never leave an agent, and the
//! target's labels exist only outside the protocol.
//!
//! All parties advance in lockstep, so the byte-level conversation is a
//! pure function of the setup: the transcript hash is identical whether
//! messages cross a thread boundary or a TCP socket.

use std::collections::HashSet;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DomainDataset;
use crate::error::{FedError, Result};
use crate::losses::{
    total_loss, AdversarialHyper, KernelConfig, LossBreakdown, LossInputs, RandomMap,
};
use crate::models::{
    collect_grads, forward_inference, lambda_warmup, lr_schedule, mlp_forward, AdamState,
    MlpParams, MlpVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transport::{encode_payload, Duplex, ProtocolMessage, TcpEnd};

// ── batching ────────────────────────────────────────────────────────────

/// Seeded minibatch index stream: shuffle, drain in slices, reshuffle when
/// exhausted. The final slice of a pass may be short; slices never span a
/// reshuffle.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0, "contract error: empty batcher");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher { order, pos: 0, batch, rng }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let hi = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..hi].to_vec();
        self.pos = hi;
        out
    }
}

/// Rounds needed so the larger dataset is seen once per epoch.
pub fn rounds_per_epoch(n_source: usize, n_target: usize, batch: usize) -> usize {
    n_source.max(n_target).div_ceil(batch)
}

// ── transcript ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub tag: String,
    pub shapes: Vec<Vec<usize>>,
    /// Hex SHA-256 of the encoded payload bytes.
    pub sha256: String,
}

/// Ordered log of every message the coordinator received or sent. Each
/// entry hashes the canonical payload encoding, so transcripts from
/// different transports agree byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Transcript::default()
    }

    pub fn log(&mut self, from: &str, to: &str, msg: &ProtocolMessage) {
        let (_, payload) = encode_payload(msg);
        let digest = Sha256::digest(&payload);
        self.entries.push(TranscriptEntry {
            seq: self.entries.len() as u64,
            from: from.to_string(),
            to: to.to_string(),
            tag: msg.tag_name().to_string(),
            shapes: msg.tensor_shapes(),
            sha256: hex::encode(digest),
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Transcript> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| FedError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Transcript { entries })
    }

    /// Hex SHA-256 of the JSONL serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FedError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| FedError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Transcript> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Transcript::from_jsonl(&text)
    }
}

// ── agents ──────────────────────────────────────────────────────────────

struct PendingRound {
    tape: Tape,
    feat_node: Var,
    vars: MlpVars,
}

/// The labeled party: private extractor, private data, a copy of the
/// coordinator's classifier for local inspection.
pub struct SourceAgent {
    pub extractor: MlpParams,
    pub classifier: MlpParams,
    adam: AdamState,
    data: DomainDataset,
    batcher: Batcher,
    lr0: f64,
    rounds_total: usize,
    round: usize,
    pending: Option<PendingRound>,
}

impl SourceAgent {
    pub fn new(
        extractor: MlpParams,
        classifier: MlpParams,
        data: DomainDataset,
        lr0: f64,
        batch: usize,
        rounds_total: usize,
        batch_seed: u64,
    ) -> Result<Self> {
        if data.labels.is_none() {
            return Err(FedError::Config("source data must be labeled".into()));
        }
        if data.dim() != extractor.input_dim() {
            return Err(FedError::Config(format!(
                "source data width {} vs extractor input {}",
                data.dim(),
                extractor.input_dim()
            )));
        }
        let adam = AdamState::new(&extractor);
        let batcher = Batcher::new(data.len(), batch, batch_seed);
        Ok(SourceAgent {
            extractor,
            classifier,
            adam,
            data,
            batcher,
            lr0,
            rounds_total,
            round: 0,
            pending: None,
        })
    }

    /// Forward one minibatch through the private extractor. The tape stays
    /// here; only latent values and labels leave.
    pub fn produce_batch(&mut self) -> ProtocolMessage {
        let idx = self.batcher.next_batch();
        let sub = self.data.subset(&idx);
        let mut tape = Tape::new();
        let vars = MlpVars::register(&mut tape, &self.extractor);
        let x = tape.leaf(sub.features);
        let outs = mlp_forward(&mut tape, &vars, &self.extractor, x);
        let feat_node = *outs.last().expect("extractor has layers");
        let features = tape.value(feat_node).clone();
        self.pending = Some(PendingRound { tape, feat_node, vars });
        ProtocolMessage::SourceBatch {
            features,
            labels: sub.labels.expect("validated at construction"),
        }
    }

    /// Finish the chain rule with the coordinator's gradient and step the
    /// extractor; adopt the refreshed classifier.
    pub fn apply_grad(&mut self, grad: &Tensor, classifier: MlpParams) -> Result<()> {
        let Some(pending) = self.pending.take() else {
            return Err(FedError::Protocol(
                "gradient arrived with no batch in flight".into(),
            ));
        };
        if grad.shape() != pending.tape.value(pending.feat_node).shape() {
            return Err(FedError::Protocol(format!(
                "gradient shape {:?} does not match batch {:?}",
                grad.shape(),
                pending.tape.value(pending.feat_node).shape()
            )));
        }
        let grads = pending.tape.backward_seeded(pending.feat_node, grad);
        let ext_grads = collect_grads(&pending.tape, &pending.vars, &grads);
        self.round += 1;
        let p = self.round as f64 / self.rounds_total as f64;
        let lr = lr_schedule(self.lr0, p);
        self.adam.step(&mut self.extractor, &ext_grads, lr);
        self.classifier = classifier;
        Ok(())
    }
}

/// The unlabeled party. Holds evaluation features and produces one
/// prediction vector per epoch; its ground truth lives outside the
/// protocol entirely.
pub struct TargetAgent {
    pub extractor: MlpParams,
    pub classifier: MlpParams,
    adam: AdamState,
    data: DomainDataset,
    batcher: Batcher,
    eval_features: Tensor,
    pub epoch_predictions: Vec<Vec<u32>>,
    lr0: f64,
    rounds_total: usize,
    round: usize,
    pending: Option<PendingRound>,
}

impl TargetAgent {
    pub fn new(
        extractor: MlpParams,
        classifier: MlpParams,
        data: DomainDataset,
        eval_features: Tensor,
        lr0: f64,
        batch: usize,
        rounds_total: usize,
        batch_seed: u64,
    ) -> Result<Self> {
        if data.dim() != extractor.input_dim() {
            return Err(FedError::Config(format!(
                "target data width {} vs extractor input {}",
                data.dim(),
                extractor.input_dim()
            )));
        }
        if eval_features.rank() != 2 || eval_features.shape()[1] != data.dim() {
            return Err(FedError::Config("evaluation features malformed".into()));
        }
        let adam = AdamState::new(&extractor);
        let batcher = Batcher::new(data.len(), batch, batch_seed);
        Ok(TargetAgent {
            extractor,
            classifier,
            adam,
            data,
            batcher,
            eval_features,
            epoch_predictions: Vec::new(),
            lr0,
            rounds_total,
            round: 0,
            pending: None,
        })
    }

    pub fn produce_batch(&mut self) -> ProtocolMessage {
        let idx = self.batcher.next_batch();
        let sub = self.data.subset(&idx);
        let mut tape = Tape::new();
        let vars = MlpVars::register(&mut tape, &self.extractor);
        let x = tape.leaf(sub.features);
        let outs = mlp_forward(&mut tape, &vars, &self.extractor, x);
        let feat_node = *outs.last().expect("extractor has layers");
        let features = tape.value(feat_node).clone();
        self.pending = Some(PendingRound { tape, feat_node, vars });
        ProtocolMessage::TargetBatch { features }
    }

    pub fn apply_grad(&mut self, grad: &Tensor, classifier: MlpParams) -> Result<()> {
        let Some(pending) = self.pending.take() else {
            return Err(FedError::Protocol(
                "gradient arrived with no batch in flight".into(),
            ));
        };
        if grad.shape() != pending.tape.value(pending.feat_node).shape() {
            return Err(FedError::Protocol(format!(
                "gradient shape {:?} does not match batch {:?}",
                grad.shape(),
                pending.tape.value(pending.feat_node).shape()
            )));
        }
        let grads = pending.tape.backward_seeded(pending.feat_node, grad);
        let ext_grads = collect_grads(&pending.tape, &pending.vars, &grads);
        self.round += 1;
        let p = self.round as f64 / self.rounds_total as f64;
        let lr = lr_schedule(self.lr0, p);
        self.adam.step(&mut self.extractor, &ext_grads, lr);
        self.classifier = classifier;
        Ok(())
    }

    /// Classify the held evaluation features with the current extractor
    /// and classifier copy. Ties break toward the smaller class index.
    pub fn predict_eval(&mut self) {
        let latent = forward_inference(&self.extractor, &self.eval_features);
        let logits = forward_inference(&self.classifier, &latent);
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let row = logits.row(i);
            let mut best = 0usize;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            preds.push(best as u32);
        }
        self.epoch_predictions.push(preds);
    }
}

// ── coordinator ─────────────────────────────────────────────────────────

/// The server side: shared classifier, domain discriminator, optimizer
/// state, and the round schedule. Sees only latent features and labels.
pub struct Coordinator {
    pub classifier: MlpParams,
    pub discriminator: MlpParams,
    adam_c: AdamState,
    adam_d: AdamState,
    rml: Option<RandomMap>,
    lambda_base: f64,
    beta: f64,
    kernel: KernelConfig,
    lr0: f64,
    rounds_total: usize,
    round: usize,
    pub breakdowns: Vec<LossBreakdown>,
}

impl Coordinator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        classifier: MlpParams,
        discriminator: MlpParams,
        rml: Option<RandomMap>,
        lambda_base: f64,
        beta: f64,
        kernel: KernelConfig,
        lr0: f64,
        rounds_total: usize,
    ) -> Self {
        let adam_c = AdamState::new(&classifier);
        let adam_d = AdamState::new(&discriminator);
        Coordinator {
            classifier,
            discriminator,
            adam_c,
            adam_d,
            rml,
            lambda_base,
            beta,
            kernel,
            lr0,
            rounds_total,
            round: 0,
            breakdowns: Vec::new(),
        }
    }

    fn check_features(&self, t: &Tensor, who: &str) -> Result<()> {
        if t.rank() != 2 || t.shape()[1] != self.classifier.input_dim() {
            return Err(FedError::Protocol(format!(
                "{who} latent shape {:?}, expected width {}",
                t.shape(),
                self.classifier.input_dim()
            )));
        }
        if !t.is_finite() {
            return Err(FedError::Protocol(format!("{who} latents contain non-finite values")));
        }
        Ok(())
    }

    /// One optimization round over a pair of received batches. Returns the
    /// two gradient replies and the loss breakdown.
    pub fn process(
        &mut self,
        src_msg: &ProtocolMessage,
        tgt_msg: &ProtocolMessage,
    ) -> Result<(ProtocolMessage, ProtocolMessage, LossBreakdown)> {
        let ProtocolMessage::SourceBatch { features: f_s, labels } = src_msg else {
            return Err(FedError::Protocol(format!(
                "expected a source batch, got {}",
                src_msg.tag_name()
            )));
        };
        let ProtocolMessage::TargetBatch { features: f_t } = tgt_msg else {
            return Err(FedError::Protocol(format!(
                "expected a target batch, got {}",
                tgt_msg.tag_name()
            )));
        };
        self.check_features(f_s, "source")?;
        self.check_features(f_t, "target")?;
        let num_classes = self.classifier.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(FedError::Protocol(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }

        let p = (self.round + 1) as f64 / self.rounds_total as f64;
        let lambda_eff = if self.lambda_base == 0.0 {
            0.0
        } else {
            self.lambda_base * lambda_warmup(p)
        };
        let lr = lr_schedule(self.lr0, p);

        let mut tape = Tape::new();
        let c_vars = MlpVars::register(&mut tape, &self.classifier);
        let d_vars = MlpVars::register(&mut tape, &self.discriminator);
        let fs = tape.leaf(f_s.clone());
        let ft = tape.leaf(f_t.clone());
        let hyper = AdversarialHyper {
            lambda: lambda_eff,
            beta: self.beta,
            grl_lambda: 1.0,
            kernel: self.kernel.clone(),
        };
        let graph = total_loss(
            &mut tape,
            &LossInputs { f_s: fs, f_t: ft, labels_s: labels },
            &c_vars,
            &self.classifier,
            &d_vars,
            &self.discriminator,
            self.rml.as_ref(),
            &hyper,
        );
        let grads = tape.backward(graph.total);
        let grad_s = grads.get_or_zeros(fs, &tape);
        let grad_t = grads.get_or_zeros(ft, &tape);
        let c_grads = collect_grads(&tape, &c_vars, &grads);
        let d_grads = collect_grads(&tape, &d_vars, &grads);
        self.adam_c.step(&mut self.classifier, &c_grads, lr);
        self.adam_d.step(&mut self.discriminator, &d_grads, lr);
        self.round += 1;
        self.breakdowns.push(graph.breakdown);

        Ok((
            ProtocolMessage::GradToSource { grad: grad_s, classifier: self.classifier.clone() },
            ProtocolMessage::GradToTarget { grad: grad_t, classifier: self.classifier.clone() },
            graph.breakdown,
        ))
    }
}

/// One full round through direct calls, logging the four messages exactly
/// as the transported loops do.
pub fn run_round(
    src: &mut SourceAgent,
    tgt: &mut TargetAgent,
    srv: &mut Coordinator,
    transcript: &mut Transcript,
) -> Result<LossBreakdown> {
    let src_msg = src.produce_batch();
    let tgt_msg = tgt.produce_batch();
    transcript.log("source", "server", &src_msg);
    transcript.log("target", "server", &tgt_msg);
    let (gs, gt, breakdown) = srv.process(&src_msg, &tgt_msg)?;
    transcript.log("server", "source", &gs);
    transcript.log("server", "target", &gt);
    let ProtocolMessage::GradToSource { grad, classifier } = gs else { unreachable!() };
    src.apply_grad(&grad, classifier)?;
    let ProtocolMessage::GradToTarget { grad, classifier } = gt else { unreachable!() };
    tgt.apply_grad(&grad, classifier)?;
    Ok(breakdown)
}

// ── supervised pretraining ──────────────────────────────────────────────

/// Warm up the source extractor and classifier on labeled source data with
/// plain minibatch SGD before federated rounds begin. The classifier state
/// is then handed to the coordinator at setup.
pub fn pretrain_source(
    extractor: &mut MlpParams,
    classifier: &mut MlpParams,
    data: &DomainDataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let labels_all = data
        .labels
        .as_ref()
        .ok_or_else(|| FedError::Config("pretraining needs labels".into()))?;
    if data.dim() != extractor.input_dim() {
        return Err(FedError::Config("pretraining data width mismatch".into()));
    }
    let mut batcher = Batcher::new(data.len(), batch, seed);
    let per_epoch = data.len().div_ceil(batch);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let idx = batcher.next_batch();
            let sub = data.subset(&idx);
            let batch_labels: Vec<u32> = idx.iter().map(|&i| labels_all[i]).collect();
            debug_assert_eq!(sub.labels.as_deref(), Some(batch_labels.as_slice()));

            let mut tape = Tape::new();
            let e_vars = MlpVars::register(&mut tape, extractor);
            let c_vars = MlpVars::register(&mut tape, classifier);
            let x = tape.leaf(sub.features);
            let f = *mlp_forward(&mut tape, &e_vars, extractor, x)
                .last()
                .expect("extractor has layers");
            let logits = *mlp_forward(&mut tape, &c_vars, classifier, f)
                .last()
                .expect("classifier has layers");
            let loss = tape.cross_entropy(logits, &batch_labels);
            total += tape.scalar_value(loss);
            let grads = tape.backward(loss);
            for (params, vars) in [(&mut *extractor, &e_vars), (&mut *classifier, &c_vars)] {
                let gs = collect_grads(&tape, vars, &grads);
                let mut flat = params.flatten();
                let gflat: Vec<f64> = gs.iter().flat_map(|t| t.data().iter().copied()).collect();
                for (p, g) in flat.iter_mut().zip(&gflat) {
                    *p -= lr * g;
                }
                params.set_from_flat(&flat);
            }
        }
        epoch_losses.push(total / per_epoch as f64);
    }
    Ok(epoch_losses)
}

// ── transported training loops ──────────────────────────────────────────

/// Scalar knobs of a training run.
#[derive(Clone, Debug)]
pub struct TrainHyper {
    pub lambda: f64,
    pub beta: f64,
    pub lr0: f64,
    pub batch: usize,
    pub epochs: usize,
    pub kernel: KernelConfig,
}

/// Everything needed to start training: parameters come pre-initialized
/// (and pre-trained), and the coordinator receives the classifier here,
/// out of band, before the first round.
pub struct TrainSetup {
    pub source_extractor: MlpParams,
    pub target_extractor: MlpParams,
    pub classifier: MlpParams,
    pub discriminator: MlpParams,
    pub rml: Option<RandomMap>,
    pub source_data: DomainDataset,
    pub target_data: DomainDataset,
    pub target_eval: Tensor,
    pub hyper: TrainHyper,
    /// Seed for the two batch streams (tags `batch_s`, `batch_t`).
    pub seed: u64,
}

pub struct TrainOutcome {
    pub source_extractor: MlpParams,
    pub target_extractor: MlpParams,
    pub classifier: MlpParams,
    pub discriminator: MlpParams,
    /// One prediction vector over the evaluation features per epoch.
    pub epoch_predictions: Vec<Vec<u32>>,
    pub round_breakdowns: Vec<LossBreakdown>,
    pub rounds_per_epoch: usize,
}

fn source_agent_loop(
    mut agent: SourceAgent,
    link: &mut dyn Duplex,
    rounds_total: usize,
    rpe: usize,
) -> Result<SourceAgent> {
    for r in 0..rounds_total {
        let msg = agent.produce_batch();
        link.send(&msg)?;
        match link.recv()? {
            ProtocolMessage::GradToSource { grad, classifier } => {
                agent.apply_grad(&grad, classifier)?;
            }
            other => {
                return Err(FedError::Protocol(format!(
                    "source agent expected its gradient, got {}",
                    other.tag_name()
                )))
            }
        }
        if (r + 1) % rpe == 0 {
            match link.recv()? {
                ProtocolMessage::EpochEnd => {}
                other => {
                    return Err(FedError::Protocol(format!(
                        "source agent expected epoch end, got {}",
                        other.tag_name()
                    )))
                }
            }
        }
    }
    match link.recv()? {
        ProtocolMessage::Shutdown => Ok(agent),
        other => Err(FedError::Protocol(format!(
            "source agent expected shutdown, got {}",
            other.tag_name()
        ))),
    }
}

fn target_agent_loop(
    mut agent: TargetAgent,
    link: &mut dyn Duplex,
    rounds_total: usize,
    rpe: usize,
) -> Result<TargetAgent> {
    for r in 0..rounds_total {
        let msg = agent.produce_batch();
        link.send(&msg)?;
        match link.recv()? {
            ProtocolMessage::GradToTarget { grad, classifier } => {
                agent.apply_grad(&grad, classifier)?;
            }
            other => {
                return Err(FedError::Protocol(format!(
                    "target agent expected its gradient, got {}",
                    other.tag_name()
                )))
            }
        }
        if (r + 1) % rpe == 0 {
            match link.recv()? {
                ProtocolMessage::EpochEnd => agent.predict_eval(),
                other => {
                    return Err(FedError::Protocol(format!(
                        "target agent expected epoch end, got {}",
                        other.tag_name()
                    )))
                }
            }
        }
    }
    match link.recv()? {
        ProtocolMessage::Shutdown => Ok(agent),
        other => Err(FedError::Protocol(format!(
            "target agent expected shutdown, got {}",
            other.tag_name()
        ))),
    }
}

fn server_loop(
    coord: &mut Coordinator,
    src_link: &mut dyn Duplex,
    tgt_link: &mut dyn Duplex,
    rounds_total: usize,
    rpe: usize,
    transcript: &mut Transcript,
) -> Result<()> {
    for r in 0..rounds_total {
        let src_msg = src_link.recv()?;
        transcript.log("source", "server", &src_msg);
        let tgt_msg = tgt_link.recv()?;
        transcript.log("target", "server", &tgt_msg);
        let (gs, gt, _) = coord.process(&src_msg, &tgt_msg)?;
        transcript.log("server", "source", &gs);
        src_link.send(&gs)?;
        transcript.log("server", "target", &gt);
        tgt_link.send(&gt)?;
        if (r + 1) % rpe == 0 {
            transcript.log("server", "source", &ProtocolMessage::EpochEnd);
            src_link.send(&ProtocolMessage::EpochEnd)?;
            transcript.log("server", "target", &ProtocolMessage::EpochEnd);
            tgt_link.send(&ProtocolMessage::EpochEnd)?;
        }
    }
    transcript.log("server", "source", &ProtocolMessage::Shutdown);
    src_link.send(&ProtocolMessage::Shutdown)?;
    transcript.log("server", "target", &ProtocolMessage::Shutdown);
    tgt_link.send(&ProtocolMessage::Shutdown)?;
    Ok(())
}

fn build_parties(setup: TrainSetup) -> Result<(SourceAgent, TargetAgent, Coordinator, usize, usize)> {
    let rpe = rounds_per_epoch(
        setup.source_data.len(),
        setup.target_data.len(),
        setup.hyper.batch,
    );
    let rounds_total = rpe * setup.hyper.epochs;
    if rounds_total == 0 {
        return Err(FedError::Config("zero training rounds".into()));
    }
    let src = SourceAgent::new(
        setup.source_extractor,
        setup.classifier.clone(),
        setup.source_data,
        setup.hyper.lr0,
        setup.hyper.batch,
        rounds_total,
        crate::models::derive_seed(setup.seed, "batch_s"),
    )?;
    let tgt = TargetAgent::new(
        setup.target_extractor,
        setup.classifier.clone(),
        setup.target_data,
        setup.target_eval,
        setup.hyper.lr0,
        setup.hyper.batch,
        rounds_total,
        crate::models::derive_seed(setup.seed, "batch_t"),
    )?;
    let coord = Coordinator::new(
        setup.classifier,
        setup.discriminator,
        setup.rml,
        setup.hyper.lambda,
        setup.hyper.beta,
        setup.hyper.kernel.clone(),
        setup.hyper.lr0,
        rounds_total,
    );
    Ok((src, tgt, coord, rounds_total, rpe))
}

fn run_threaded(
    src: SourceAgent,
    tgt: TargetAgent,
    mut coord: Coordinator,
    mut src_agent_link: Box<dyn Duplex>,
    mut tgt_agent_link: Box<dyn Duplex>,
    mut src_srv_link: Box<dyn Duplex>,
    mut tgt_srv_link: Box<dyn Duplex>,
    rounds_total: usize,
    rpe: usize,
    transcript: &mut Transcript,
) -> Result<TrainOutcome> {
    let (srv_res, src_res, tgt_res) = std::thread::scope(|s| {
        let h_src = s.spawn(move || {
            let r = source_agent_loop(src, src_agent_link.as_mut(), rounds_total, rpe);
            drop(src_agent_link);
            r
        });
        let h_tgt = s.spawn(move || {
            let r = target_agent_loop(tgt, tgt_agent_link.as_mut(), rounds_total, rpe);
            drop(tgt_agent_link);
            r
        });
        let srv_res = server_loop(
            &mut coord,
            src_srv_link.as_mut(),
            tgt_srv_link.as_mut(),
            rounds_total,
            rpe,
            transcript,
        );
        // closing the coordinator's ends unblocks agents if the loop bailed
        drop(src_srv_link);
        drop(tgt_srv_link);
        let src_res = h_src.join().expect("source agent thread panicked");
        let tgt_res = h_tgt.join().expect("target agent thread panicked");
        (srv_res, src_res, tgt_res)
    });
    srv_res?;
    let src = src_res?;
    let tgt = tgt_res?;
    Ok(TrainOutcome {
        source_extractor: src.extractor,
        target_extractor: tgt.extractor,
        classifier: coord.classifier.clone(),
        discriminator: coord.discriminator.clone(),
        epoch_predictions: tgt.epoch_predictions,
        round_breakdowns: coord.breakdowns.clone(),
        rounds_per_epoch: rpe,
    })
}

/// Train with all three parties in one process, exchanging messages over
/// in-process channels. Bit-exact with the TCP deployment.
pub fn train_inproc(setup: TrainSetup, transcript: &mut Transcript) -> Result<TrainOutcome> {
    let (src, tgt, coord, rounds_total, rpe) = build_parties(setup)?;
    let (src_agent_link, src_srv_link) = crate::transport::inproc_pair();
    let (tgt_agent_link, tgt_srv_link) = crate::transport::inproc_pair();
    run_threaded(
        src,
        tgt,
        coord,
        Box::new(src_agent_link),
        Box::new(tgt_agent_link),
        Box::new(src_srv_link),
        Box::new(tgt_srv_link),
        rounds_total,
        rpe,
        transcript,
    )
}

/// Train over real TCP sockets: the coordinator listens on `listen_addr`,
/// both agents dial in (optionally at distinct addresses, for setups where
/// the listener sits behind a proxy), and the coordinator tells the two
/// connections apart by their first frame.
pub fn train_tcp(
    setup: TrainSetup,
    listen_addr: &str,
    source_dial: Option<&str>,
    target_dial: Option<&str>,
    transcript: &mut Transcript,
) -> Result<TrainOutcome> {
    let (src, tgt, mut coord, rounds_total, rpe) = build_parties(setup)?;
    let listener = TcpListener::bind(listen_addr)
        .map_err(|e| FedError::Transport(format!("cannot listen on {listen_addr}: {e}")))?;
    let actual = listener
        .local_addr()
        .map_err(|e| FedError::Transport(format!("listener address unknown: {e}")))?
        .to_string();
    let src_dial = source_dial.unwrap_or(&actual).to_string();
    let tgt_dial = target_dial.unwrap_or(&actual).to_string();

    let (srv_res, src_res, tgt_res) = std::thread::scope(|s| {
        let h_src = s.spawn(move || -> Result<SourceAgent> {
            let mut link = TcpEnd::connect(&src_dial)?;
            source_agent_loop(src, &mut link, rounds_total, rpe)
        });
        let h_tgt = s.spawn(move || -> Result<TargetAgent> {
            let mut link = TcpEnd::connect(&tgt_dial)?;
            target_agent_loop(tgt, &mut link, rounds_total, rpe)
        });

        // identify the two incoming connections by their opening frame,
        // then run the ordinary server loop over them
        let srv_res = (|| -> Result<()> {
            let mut source_end: Option<TcpEnd> = None;
            let mut target_end: Option<TcpEnd> = None;
            for _ in 0..2 {
                let (stream, _) = listener
                    .accept()
                    .map_err(|e| FedError::Transport(format!("accept failed: {e}")))?;
                let mut end = TcpEnd::from_stream(stream)?;
                match end.peek_first()?.tag() {
                    1 if source_end.is_none() => source_end = Some(end),
                    2 if target_end.is_none() => target_end = Some(end),
                    t => {
                        return Err(FedError::Protocol(format!(
                            "cannot identify connection opening with tag {t}"
                        )))
                    }
                }
            }
            let mut src_link = source_end.expect("both connections identified");
            let mut tgt_link = target_end.expect("both connections identified");
            server_loop(
                &mut coord,
                &mut src_link,
                &mut tgt_link,
                rounds_total,
                rpe,
                transcript,
            )
        })();
        // the server's ends drop as the closure returns, unblocking agents
        // if the loop bailed early
        let src_res = h_src.join().expect("source agent thread panicked");
        let tgt_res = h_tgt.join().expect("target agent thread panicked");
        (srv_res, src_res, tgt_res)
    });
    srv_res?;
    let src = src_res?;
    let tgt = tgt_res?;
    Ok(TrainOutcome {
        source_extractor: src.extractor,
        target_extractor: tgt.extractor,
        classifier: coord.classifier.clone(),
        discriminator: coord.discriminator.clone(),
        epoch_predictions: tgt.epoch_predictions,
        round_breakdowns: coord.breakdowns.clone(),
        rounds_per_epoch: rpe,
    })
}

// ── privacy audit ───────────────────────────────────────────────────────

/// What the auditor knows about the raw data, supplied from outside the
/// transcript: the latent width, the raw feature widths of both parties,
/// and hashes of every raw row.
pub struct AuditContext {
    pub latent_dim: usize,
    pub raw_widths: Vec<usize>,
    /// Hex SHA-256 of each raw row's little-endian byte image.
    pub raw_row_hashes: HashSet<String>,
}

impl AuditContext {
    pub fn from_datasets(latent_dim: usize, datasets: &[&DomainDataset]) -> Self {
        let mut raw_widths = Vec::new();
        let mut raw_row_hashes = HashSet::new();
        for ds in datasets {
            raw_widths.push(ds.dim());
            for i in 0..ds.len() {
                raw_row_hashes.insert(hash_row(ds.features.row(i)));
            }
        }
        AuditContext {
            latent_dim,
            raw_widths,
            raw_row_hashes,
        }
    }
}

/// Hex SHA-256 of a row of values, little-endian, as transmitted.
pub fn hash_row(row: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in row {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditViolation {
    pub seq: u64,
    pub rule: String,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub violations: Vec<AuditViolation>,
    pub warnings: Vec<String>,
}

/// Check a transcript for structural soundness and, with context, for any
/// trace of raw data crossing a boundary:
///
/// * the leading tensor of a batch or gradient message whose width equals
///   a raw feature width is flagged (a violation, unless that width
///   happens to equal the latent width, which downgrades to a warning);
/// * any payload whose hash equals the hash of a raw data row is flagged;
/// * message kinds must travel in their one legal direction, sequence
///   numbers must count up from zero, and batch tensors must be matrices.
pub fn privacy_audit(transcript: &Transcript, ctx: Option<&AuditContext>) -> AuditReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    if ctx.is_none() {
        warnings.push(
            "no data context supplied; width and raw-row checks skipped".to_string(),
        );
    }

    for (i, e) in transcript.entries.iter().enumerate() {
        if e.seq != i as u64 {
            violations.push(AuditViolation {
                seq: e.seq,
                rule: "sequence".into(),
                detail: format!("entry {i} carries seq {}", e.seq),
            });
        }

        let legal = match e.tag.as_str() {
            "source_batch" => ("source", "server"),
            "target_batch" => ("target", "server"),
            "grad_to_source" => ("server", "source"),
            "grad_to_target" => ("server", "target"),
            "epoch_end" | "shutdown" => ("server", "*"),
            other => {
                violations.push(AuditViolation {
                    seq: e.seq,
                    rule: "direction".into(),
                    detail: format!("unknown message tag {other:?}"),
                });
                continue;
            }
        };
        if e.from != legal.0 || (legal.1 != "*" && e.to != legal.1) {
            violations.push(AuditViolation {
                seq: e.seq,
                rule: "direction".into(),
                detail: format!("{} sent {} -> {}", e.tag, e.from, e.to),
            });
        }

        let is_batch = e.tag == "source_batch" || e.tag == "target_batch";
        let is_grad = e.tag == "grad_to_source" || e.tag == "grad_to_target";
        if (is_batch || is_grad) && (e.shapes.is_empty() || e.shapes[0].len() != 2) {
            violations.push(AuditViolation {
                seq: e.seq,
                rule: "shape".into(),
                detail: format!("{} leading tensor {:?}", e.tag, e.shapes.first()),
            });
            continue;
        }

        if let Some(ctx) = ctx {
            // Only the leading tensor is a feature/gradient matrix; the
            // classifier parameters behind it have their own widths.
            if is_batch || is_grad {
                let width = e.shapes[0][1];
                if ctx.raw_widths.contains(&width) {
                    if width == ctx.latent_dim {
                        warnings.push(format!(
                            "seq {}: latent width {} collides with a raw feature width",
                            e.seq, width
                        ));
                    } else {
                        violations.push(AuditViolation {
                            seq: e.seq,
                            rule: "width".into(),
                            detail: format!(
                                "{} carries a tensor of raw width {width}",
                                e.tag
                            ),
                        });
                    }
                }
            }
            if ctx.raw_row_hashes.contains(&e.sha256) {
                violations.push(AuditViolation {
                    seq: e.seq,
                    rule: "raw-row".into(),
                    detail: "payload hash equals a raw data row hash".into(),
                });
            }
        }
    }

    AuditReport {
        passed: violations.is_empty(),
        violations,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::losses::Bandwidth;
    use crate::models::{derive_seed, NetConfig};

    #[test]
    fn batcher_covers_everything_each_pass() {
        let mut b = Batcher::new(10, 4, 3);
        let mut seen: Vec<usize> = Vec::new();
        let sizes: Vec<usize> = (0..3).map(|_| {
            let batch = b.next_batch();
            seen.extend_from_slice(&batch);
            batch.len()
        }).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());

        // second pass is a fresh permutation, again complete
        let mut second: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        second.sort_unstable();
        assert_eq!(second, (0..10).collect::<Vec<_>>());

        let mut b1 = Batcher::new(10, 4, 3);
        let mut b2 = Batcher::new(10, 4, 3);
        assert_eq!(b1.next_batch(), b2.next_batch());
    }

    #[test]
    fn rounds_per_epoch_rounds_up() {
        assert_eq!(rounds_per_epoch(10, 7, 4), 3);
        assert_eq!(rounds_per_epoch(8, 8, 4), 2);
        assert_eq!(rounds_per_epoch(3, 9, 3), 3);
    }

    #[test]
    fn transcript_roundtrips_and_hashes_stably() {
        let mut t = Transcript::new();
        t.log("source", "server", &ProtocolMessage::EpochEnd);
        t.log(
            "target",
            "server",
            &ProtocolMessage::TargetBatch { features: Tensor::new([1, 2], vec![1.0, 2.0]) },
        );
        assert_eq!(t.entries[0].seq, 0);
        assert_eq!(t.entries[1].seq, 1);
        assert_eq!(t.entries[1].shapes, vec![vec![1, 2]]);
        let jsonl = t.to_jsonl();
        assert_eq!(jsonl.lines().count(), 2);
        let back = Transcript::from_jsonl(&jsonl).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
    }

    fn tiny_world(seed: u64, lambda: f64, beta: f64) -> (TrainSetup, crate::data::EvalLabels) {
        let dcfg = SyntheticConfig {
            samples_per_domain: 24,
            source_features: 6,
            target_features: 5,
            overlapping_features: 3,
            latent_dim: 4,
            classes: 3,
            seed,
            ..SyntheticConfig::default()
        };
        let (src, tgt, hidden) = generate_synthetic(&dcfg).unwrap();
        let net = NetConfig {
            extractor_hidden: vec![8],
            latent_dim: 4,
            classifier_hidden: vec![6],
            num_classes: 3,
            disc_hidden: vec![8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let setup = TrainSetup {
            source_extractor: MlpParams::init(&net.extractor_dims(6), &mut rng),
            target_extractor: MlpParams::init(&net.extractor_dims(5), &mut rng),
            classifier: MlpParams::init(&net.classifier_dims(), &mut rng),
            discriminator: MlpParams::init(&net.discriminator_dims(4 * 3), &mut rng),
            rml: None,
            source_data: src,
            target_data: tgt.clone(),
            target_eval: tgt.features.clone(),
            hyper: TrainHyper {
                lambda,
                beta,
                lr0: 0.01,
                batch: 8,
                epochs: 2,
                kernel: KernelConfig {
                    multipliers: vec![0.5, 1.0, 2.0],
                    bandwidth: Bandwidth::Median,
                },
            },
            seed,
        };
        (setup, hidden)
    }

    #[test]
    fn run_round_updates_everyone_and_logs_four_messages() {
        let (setup, _) = tiny_world(5, 1.0, 0.5);
        let rpe = rounds_per_epoch(24, 24, 8);
        let rounds_total = rpe * 2;
        let mut src = SourceAgent::new(
            setup.source_extractor.clone(),
            setup.classifier.clone(),
            setup.source_data.clone(),
            0.01,
            8,
            rounds_total,
            derive_seed(5, "batch_s"),
        )
        .unwrap();
        let mut tgt = TargetAgent::new(
            setup.target_extractor.clone(),
            setup.classifier.clone(),
            setup.target_data.clone(),
            setup.target_eval.clone(),
            0.01,
            8,
            rounds_total,
            derive_seed(5, "batch_t"),
        )
        .unwrap();
        let mut coord = Coordinator::new(
            setup.classifier.clone(),
            setup.discriminator.clone(),
            None,
            1.0,
            0.5,
            setup.hyper.kernel.clone(),
            0.01,
            rounds_total,
        );
        let mut transcript = Transcript::new();
        let before_src = src.extractor.clone();
        let before_cls = coord.classifier.clone();
        let b = run_round(&mut src, &mut tgt, &mut coord, &mut transcript).unwrap();
        assert!(b.total.is_finite());
        assert!(b.l_cls > 0.0);
        assert_eq!(transcript.entries.len(), 4);
        assert_eq!(
            transcript.entries.iter().map(|e| e.tag.as_str()).collect::<Vec<_>>(),
            vec!["source_batch", "target_batch", "grad_to_source", "grad_to_target"]
        );
        assert_ne!(src.extractor, before_src);
        assert_ne!(coord.classifier, before_cls);
        assert_eq!(src.classifier, coord.classifier);
        assert_eq!(tgt.classifier, coord.classifier);
    }

    #[test]
    fn grad_without_batch_is_a_protocol_error() {
        let (setup, _) = tiny_world(6, 1.0, 0.5);
        let mut src = SourceAgent::new(
            setup.source_extractor,
            setup.classifier.clone(),
            setup.source_data,
            0.01,
            8,
            6,
            1,
        )
        .unwrap();
        let err = src.apply_grad(&Tensor::zeros(vec![8, 4]), setup.classifier);
        assert!(matches!(err, Err(FedError::Protocol(_))));
    }

    #[test]
    fn coordinator_rejects_malformed_rounds() {
        let (setup, _) = tiny_world(7, 1.0, 0.5);
        let mut coord = Coordinator::new(
            setup.classifier.clone(),
            setup.discriminator.clone(),
            None,
            1.0,
            0.5,
            setup.hyper.kernel.clone(),
            0.01,
            6,
        );
        let good_t = ProtocolMessage::TargetBatch { features: Tensor::zeros(vec![4, 4]) };
        // wrong message kind in the source slot
        assert!(matches!(
            coord.process(&good_t.clone(), &good_t),
            Err(FedError::Protocol(_))
        ));
        // latent width mismatch
        let bad_s = ProtocolMessage::SourceBatch {
            features: Tensor::zeros(vec![4, 7]),
            labels: vec![0; 4],
        };
        assert!(matches!(coord.process(&bad_s, &good_t), Err(FedError::Protocol(_))));
        // label out of range
        let bad_l = ProtocolMessage::SourceBatch {
            features: Tensor::zeros(vec![2, 4]),
            labels: vec![0, 9],
        };
        assert!(matches!(coord.process(&bad_l, &good_t), Err(FedError::Protocol(_))));
    }

    #[test]
    fn train_inproc_runs_deterministically() {
        let (setup1, _) = tiny_world(8, 1.0, 0.5);
        let (setup2, _) = tiny_world(8, 1.0, 0.5);
        let mut t1 = Transcript::new();
        let mut t2 = Transcript::new();
        let o1 = train_inproc(setup1, &mut t1).unwrap();
        let o2 = train_inproc(setup2, &mut t2).unwrap();

        let rpe = rounds_per_epoch(24, 24, 8);
        let rounds = rpe * 2;
        assert_eq!(o1.epoch_predictions.len(), 2);
        assert_eq!(o1.round_breakdowns.len(), rounds);
        // per round 4 messages, plus 2 epoch-end markers per epoch, plus 2 shutdowns
        assert_eq!(t1.entries.len(), rounds * 4 + 2 * 2 + 2);
        assert_eq!(t1.hash(), t2.hash());
        assert_eq!(o1.source_extractor, o2.source_extractor);
        assert_eq!(o1.target_extractor, o2.target_extractor);
        assert_eq!(o1.classifier, o2.classifier);
        assert_eq!(o1.discriminator, o2.discriminator);
        assert_eq!(o1.epoch_predictions, o2.epoch_predictions);
    }

    #[test]
    fn tcp_and_inproc_transcripts_match() {
        let (setup1, _) = tiny_world(9, 1.0, 0.5);
        let (setup2, _) = tiny_world(9, 1.0, 0.5);
        let mut t_in = Transcript::new();
        let mut t_tcp = Transcript::new();
        let o_in = train_inproc(setup1, &mut t_in).unwrap();
        let o_tcp = train_tcp(setup2, "127.0.0.1:0", None, None, &mut t_tcp).unwrap();
        assert_eq!(t_in.hash(), t_tcp.hash());
        assert_eq!(o_in.source_extractor, o_tcp.source_extractor);
        assert_eq!(o_in.epoch_predictions, o_tcp.epoch_predictions);
    }

    #[test]
    fn pretraining_reduces_classification_loss() {
        let dcfg = SyntheticConfig {
            samples_per_domain: 60,
            ..SyntheticConfig::default()
        };
        let (src, _, _) = generate_synthetic(&dcfg).unwrap();
        let net = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ext = MlpParams::init(&net.extractor_dims(12), &mut rng);
        let mut cls = MlpParams::init(&net.classifier_dims(), &mut rng);
        let losses = pretrain_source(&mut ext, &mut cls, &src, 8, 16, 0.01, 11).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn audit_passes_clean_run_and_catches_tampering() {
        let (setup, _) = tiny_world(10, 1.0, 0.5);
        let src_data = setup.source_data.clone();
        let tgt_data = setup.target_data.clone();
        let latent = setup.classifier.input_dim();
        let mut transcript = Transcript::new();
        train_inproc(setup, &mut transcript).unwrap();

        let ctx = AuditContext::from_datasets(latent, &[&src_data, &tgt_data]);
        let report = privacy_audit(&transcript, Some(&ctx));
        assert!(report.passed, "clean run flagged: {:?}", report.violations);

        // raw-width leak: a "latent" tensor with the source's raw width
        let mut leaky = transcript.clone();
        let seq = leaky.entries.len() as u64;
        leaky.entries.push(TranscriptEntry {
            seq,
            from: "source".into(),
            to: "server".into(),
            tag: "source_batch".into(),
            shapes: vec![vec![8, src_data.dim()]],
            sha256: "0".repeat(64),
        });
        let report = privacy_audit(&leaky, Some(&ctx));
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| v.seq == seq && v.rule == "width"));

        // raw-row leak: payload hash equal to a raw row's hash
        let mut exfil = transcript.clone();
        let seq = exfil.entries.len() as u64;
        exfil.entries.push(TranscriptEntry {
            seq,
            from: "source".into(),
            to: "server".into(),
            tag: "source_batch".into(),
            shapes: vec![vec![1, latent]],
            sha256: hash_row(src_data.features.row(3)),
        });
        let report = privacy_audit(&exfil, Some(&ctx));
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| v.seq == seq && v.rule == "raw-row"));

        // direction violation: a gradient flowing agent -> server
        let mut wrongway = transcript.clone();
        wrongway.entries[2].from = "source".into();
        wrongway.entries[2].to = "server".into();
        let report = privacy_audit(&wrongway, Some(&ctx));
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| v.seq == 2 && v.rule == "direction"));

        // structural check still works without context
        let report = privacy_audit(&wrongway, None);
        assert!(!report.passed);
        assert!(!report.warnings.is_empty());
    }
}
