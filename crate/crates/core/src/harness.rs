//! Sequential split-learning loop: clients take turns training one shared
//! model, every cut-layer exchange crosses a [`SimulatedLink`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::acp::{AdaptivePruner, PruneDecision, RatioBounds};
use crate::baselines::{
    self, QuantizedMessage, SchemeConfig, SchemeKind, ScoringKind, SparseMessage,
};
use crate::config::{EvalPath, PartitionScheme, RunConfig, TrainingConfig};
use crate::data::{self, Dataset, Partition};
use crate::error::{Error, Result};
use crate::lcis::{self, FeatureBatch, ScoreState};
use crate::metrics::{self, RoundMetrics, SchemeSummary};
use crate::nn::{softmax_cross_entropy, ModelSpec, SplitModel};
use crate::protocol::{self, ByteLedger, Direction, Envelope, Frame, MessageKind, SimulatedLink};
use crate::tensor::Tensor;

/// The six steps of one training iteration, in the only order allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    ClientForward,
    Scoring,
    Pruning,
    ServerStep,
    GradientReturn,
    ClientBackward,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::ClientForward,
        Stage::Scoring,
        Stage::Pruning,
        Stage::ServerStep,
        Stage::GradientReturn,
        Stage::ClientBackward,
    ];

    fn index(self) -> usize {
        Stage::ORDER
            .iter()
            .position(|&s| s == self)
            .expect("listed")
    }
}

/// Rejects any stage entered out of order.
#[derive(Clone, Debug, Default)]
pub struct StageTracker {
    next: usize,
}

impl StageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&mut self, stage: Stage) -> Result<()> {
        let expected = Stage::ORDER[self.next];
        if stage != expected {
            return Err(Error::ProtocolOrder(format!(
                "stage {stage:?} entered while {expected:?} was expected"
            )));
        }
        self.next = (stage.index() + 1) % Stage::ORDER.len();
        Ok(())
    }

    /// True between iterations.
    pub fn is_idle(&self) -> bool {
        self.next == 0
    }
}

/// One row of `decisions.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub scheme: String,
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub iteration: usize,
    pub d_inst: f64,
    pub d_hist: f64,
    pub w_t: f64,
    pub p_t: f64,
    pub k: usize,
}

/// One row of `scores.csv`, taken at the end of each round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub scheme: String,
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub channel: usize,
    pub s_inst: f64,
    pub s_hist: f64,
    pub s_comb: f64,
}

/// Everything the training loop needs besides the scheme and seed.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub spec: ModelSpec,
    pub training: TrainingConfig,
    pub bounds: RatioBounds,
    pub record_decisions: bool,
    pub record_scores: bool,
    pub trace: bool,
    /// Client activation order within a round; `None` means by id.
    pub activation_order: Option<Vec<usize>>,
}

impl<'a> TrainSetup<'a> {
    pub fn new(
        train: &'a Dataset,
        test: &'a Dataset,
        spec: ModelSpec,
        training: TrainingConfig,
    ) -> Self {
        TrainSetup {
            train,
            test,
            spec,
            training,
            bounds: RatioBounds::default(),
            record_decisions: false,
            record_scores: false,
            trace: false,
            activation_order: None,
        }
    }
}

/// Output of one scheme under one seed.
#[derive(Debug)]
pub struct SchemeRun {
    pub scheme: String,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub decisions: Vec<DecisionRecord>,
    pub scores: Vec<ScoreRecord>,
    pub ledger: ByteLedger,
    pub model: SplitModel,
    pub trace: Option<Vec<u8>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Client randomness depends only on the run seed and the content of the
/// client's shard, not on its id or its position in the activation order.
fn client_seed(seed: u64, dataset: &Dataset, indices: &[usize]) -> u64 {
    let per_sample = dataset.images.numel() / dataset.len().max(1);
    indices.iter().fold(splitmix(seed), |h, &i| {
        let pixels = &dataset.images.data()[i * per_sample..(i + 1) * per_sample];
        let h = pixels.iter().fold(h, |h, v| {
            (h ^ v.to_bits() as u64).wrapping_mul(0x0100_0000_01B3)
        });
        splitmix(h ^ dataset.labels[i] as u64)
    })
}

struct Client {
    id: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    scores: ScoreState,
    pruner: AdaptivePruner,
}

impl Client {
    fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        if self.order.len() <= batch_size {
            return &self.order;
        }
        if self.cursor + batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += batch_size;
        &self.order[start..start + batch_size]
    }
}

/// Mask and statistics used for one uplink/downlink pair.
struct Transmission {
    decision: Option<PruneDecision>,
}

fn send<F: Frame>(link: &mut SimulatedLink, dir: Direction, frame: F) -> Result<(F, Tensor<f32>)> {
    let received = link.transmit(dir, &frame)?;
    let t = received.reconstruct()?;
    Ok((received, t))
}

struct Trainer<'s, 'a> {
    setup: &'s TrainSetup<'a>,
    scheme: &'s SchemeConfig,
    label: String,
    seed: u64,
    model: SplitModel,
    link: SimulatedLink,
    clients: Vec<Client>,
    decisions: Vec<DecisionRecord>,
    scores: Vec<ScoreRecord>,
    tracker: StageTracker,
    /// Kept set of the most recent pruning decision, reused for evaluation.
    last_kept: Option<Vec<usize>>,
    eval_rng: ChaCha8Rng,
}

impl<'s, 'a> Trainer<'s, 'a> {
    fn new(
        setup: &'s TrainSetup<'a>,
        scheme: &'s SchemeConfig,
        seed: u64,
        partition: &Partition,
    ) -> Result<Self> {
        scheme.validate()?;
        partition.validate(setup.train.len())?;
        if partition.num_clients() > u16::MAX as usize {
            return Err(Error::Config("client ids must fit in a u16".into()));
        }
        if let Some(order) = &setup.activation_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..partition.num_clients()).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "activation order {order:?} is not a permutation of the {} clients",
                    partition.num_clients()
                )));
            }
        }
        let model = SplitModel::build(&setup.spec, setup.train.sample_shape(), seed)?;
        let channels = model.cut_shape(1)[1];
        let total = setup.training.total_iterations();
        let clients = partition
            .assignments
            .iter()
            .enumerate()
            .map(|(id, indices)| {
                let mut rng = ChaCha8Rng::seed_from_u64(client_seed(seed, setup.train, indices));
                let mut order = indices.clone();
                order.shuffle(&mut rng);
                Ok(Client {
                    id,
                    order,
                    cursor: 0,
                    rng,
                    scores: ScoreState::new(channels, total)?,
                    pruner: AdaptivePruner::new(setup.bounds)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            setup,
            scheme,
            label: scheme.label(),
            seed,
            model,
            link: if setup.trace {
                SimulatedLink::with_trace()
            } else {
                SimulatedLink::new()
            },
            clients,
            decisions: Vec::new(),
            scores: Vec::new(),
            tracker: StageTracker::new(),
            last_kept: None,
            eval_rng: ChaCha8Rng::seed_from_u64(splitmix(!seed)),
        })
    }

    fn diverged(
        &self,
        round: usize,
        client: usize,
        iteration: usize,
        what: &str,
        decision: Option<&PruneDecision>,
    ) -> Error {
        let mut detail = what.to_string();
        if let Some(d) = decision {
            let _ = write!(
                detail,
                "; last decision: d_inst = {}, d_hist = {}, w_t = {}, p_t = {}, kept = {:?}",
                d.d_inst, d.d_hist, d.w_t, d.ratio, d.kept
            );
        }
        Error::Diverged {
            round,
            client,
            iteration,
            detail,
        }
    }

    /// Runs one iteration for client `ci`; returns the loss and the decision.
    fn iterate(
        &mut self,
        ci: usize,
        round: usize,
        iteration: usize,
    ) -> Result<(f64, Transmission)> {
        let lr = self.setup.training.learning_rate;
        let num_classes = self.setup.train.num_classes;
        let envelope = Envelope {
            round: round as u32,
            client_id: ci as u16,
            iteration: iteration as u32,
        };

        self.tracker.enter(Stage::ClientForward)?;
        let batch_size = self.setup.training.batch_size;
        let indices = self.clients[ci].next_batch(batch_size).to_vec();
        let (x, y) = self.setup.train.batch(&indices)?;
        let smashed = self
            .model
            .forward_client(&x, true)
            .map_err(|e| self.diverged(round, ci, iteration, &e.to_string(), None))?;

        self.tracker.enter(Stage::Scoring)?;
        let kind = self.scheme.kind;
        let (smashed, combined) = if kind.prunes_channels() {
            let client = &mut self.clients[ci];
            match self.scheme.scoring {
                ScoringKind::Lcis => {
                    let fb = FeatureBatch::new(smashed, y.clone(), num_classes, client.scores.t())?;
                    let inst = lcis::score_batch(&fb)?.instantaneous;
                    let combined = client.scores.update(&inst)?.to_vec();
                    (fb.into_parts().0, Some(combined))
                }
                ScoringKind::L0 => {
                    let fb = FeatureBatch::new(smashed, y.clone(), num_classes, iteration)?;
                    let s = baselines::l0_scores(&fb);
                    (fb.into_parts().0, Some(s))
                }
                ScoringKind::Random => {
                    let n = smashed.dim(1);
                    (smashed, Some(baselines::random_scores(n, &mut client.rng)))
                }
            }
        } else {
            (smashed, None)
        };

        self.tracker.enter(Stage::Pruning)?;
        let decision = match (kind, combined) {
            (SchemeKind::AcpSl, Some(c)) => Some(self.clients[ci].pruner.decide(&c)),
            (SchemeKind::FixedRatio, Some(c)) => {
                let r = baselines::fixed_ratio(self.scheme.fixed_ratio);
                Some(self.clients[ci].pruner.decide_with_ratio(&c, r))
            }
            (SchemeKind::RandomRatio, Some(c)) => {
                let client = &mut self.clients[ci];
                let r = baselines::random_ratio(&self.setup.bounds, &mut client.rng);
                Some(client.pruner.decide_with_ratio(&c, r))
            }
            _ => None,
        };
        let up = Direction::Uplink;
        let received = match kind {
            SchemeKind::RandTopk => {
                let s = self.scheme;
                let msg = SparseMessage::encode(
                    &smashed,
                    s.k_fraction,
                    s.rand_fraction,
                    MessageKind::Smashed,
                    envelope,
                    &mut self.clients[ci].rng,
                )?;
                send(&mut self.link, up, msg)?.1
            }
            SchemeKind::Quantization => {
                let msg = QuantizedMessage::encode(
                    &smashed,
                    self.scheme.quant_bits,
                    MessageKind::Smashed,
                    envelope,
                )?;
                send(&mut self.link, up, msg)?.1
            }
            _ => {
                let kept = match &decision {
                    Some(d) => d.kept.clone(),
                    None => (0..smashed.dim(1)).collect(),
                };
                let msg = protocol::pack(&smashed, &kept, MessageKind::Smashed, envelope)?;
                send(&mut self.link, up, msg)?.1
            }
        };
        drop(smashed);

        self.tracker.enter(Stage::ServerStep)?;
        let (loss, grad) = self
            .model
            .forward_backward_server(&received, &y, lr)
            .map_err(|e| self.diverged(round, ci, iteration, &e.to_string(), decision.as_ref()))?;
        if !loss.is_finite() {
            return Err(self.diverged(
                round,
                ci,
                iteration,
                &format!("loss = {loss}"),
                decision.as_ref(),
            ));
        }

        self.tracker.enter(Stage::GradientReturn)?;
        let down = Direction::Downlink;
        let grad_received = match kind {
            SchemeKind::RandTopk => {
                let s = self.scheme;
                let msg = SparseMessage::encode(
                    &grad,
                    s.k_fraction,
                    s.rand_fraction,
                    MessageKind::Gradient,
                    envelope,
                    &mut self.clients[ci].rng,
                )?;
                send(&mut self.link, down, msg)?.1
            }
            SchemeKind::Quantization => {
                let msg = QuantizedMessage::encode(
                    &grad,
                    self.scheme.quant_bits,
                    MessageKind::Gradient,
                    envelope,
                )?;
                send(&mut self.link, down, msg)?.1
            }
            _ => {
                let kept = match &decision {
                    Some(d) => d.kept.clone(),
                    None => (0..grad.dim(1)).collect(),
                };
                let msg = protocol::pack(&grad, &kept, MessageKind::Gradient, envelope)?;
                let (msg, t) = send(&mut self.link, down, msg)?;
                if msg
                    .kept_indices
                    .iter()
                    .map(|&i| i as usize)
                    .ne(kept.iter().copied())
                {
                    return Err(Error::Protocol(
                        "gradient mask differs from the uplink mask".into(),
                    ));
                }
                t
            }
        };

        self.tracker.enter(Stage::ClientBackward)?;
        self.model
            .backward_client(&grad_received, lr)
            .map_err(|e| match e {
                Error::NonFinite(m) => self.diverged(round, ci, iteration, &m, decision.as_ref()),
                other => other,
            })?;
        Ok((loss, Transmission { decision }))
    }

    /// The receiver's view of `smashed` under this scheme's compression,
    /// without touching the link or its ledger.
    fn eval_view(&mut self, smashed: Tensor<f32>) -> Result<Tensor<f32>> {
        let env = Envelope::default();
        if self.setup.training.eval_path == EvalPath::Uncompressed {
            return Ok(smashed);
        }
        match self.scheme.kind {
            SchemeKind::Standard => Ok(smashed),
            SchemeKind::RandTopk => SparseMessage::encode(
                &smashed,
                self.scheme.k_fraction,
                self.scheme.rand_fraction,
                MessageKind::Smashed,
                env,
                &mut self.eval_rng,
            )?
            .reconstruct(),
            SchemeKind::Quantization => QuantizedMessage::encode(
                &smashed,
                self.scheme.quant_bits,
                MessageKind::Smashed,
                env,
            )?
            .reconstruct(),
            SchemeKind::AcpSl | SchemeKind::FixedRatio | SchemeKind::RandomRatio => {
                match &self.last_kept {
                    Some(kept) => {
                        protocol::pack(&smashed, kept, MessageKind::Smashed, env)?.reconstruct()
                    }
                    None => Ok(smashed),
                }
            }
        }
    }

    /// Test loss and accuracy on the global test set; test traffic never
    /// reaches the ledger.
    fn evaluate(&mut self) -> Result<(f64, f64)> {
        let test = self.setup.test;
        let bs = self.setup.training.eval_batch_size;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let all: Vec<usize> = (0..test.len()).collect();
        for chunk in all.chunks(bs) {
            let (x, y) = test.batch(chunk)?;
            let smashed = self.model.forward_client(&x, false)?;
            let received = self.eval_view(smashed)?;
            let logits = self.model.server.forward(&received, false)?;
            let (loss, _) = softmax_cross_entropy(&logits, &y)?;
            loss_sum += loss * chunk.len() as f64;
            let k = logits.dim(1);
            for (row, &label) in logits.data().chunks(k).zip(&y) {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                correct += usize::from(best == label);
            }
        }
        let n = test.len().max(1) as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    fn run(mut self, on_round: &mut dyn FnMut(&RoundMetrics)) -> Result<SchemeRun> {
        let training = self.setup.training.clone();
        let channels = self.model.cut_shape(1)[1];
        let mut rows = Vec::with_capacity(training.rounds);
        for round in 1..=training.rounds {
            let mut loss_sum = 0.0;
            let mut ratio_sum = 0.0;
            let mut k_sum = 0usize;
            let mut steps = 0usize;
            let order: Vec<usize> = match &self.setup.activation_order {
                Some(o) => o.clone(),
                None => (0..self.clients.len()).collect(),
            };
            for ci in order {
                for b in 0..training.batches_per_round {
                    let iteration = (round - 1) * training.batches_per_round + b;
                    let (loss, tx) = self.iterate(ci, round, iteration)?;
                    loss_sum += loss;
                    steps += 1;
                    match &tx.decision {
                        Some(d) => {
                            self.last_kept = Some(d.kept.clone());
                            ratio_sum += d.ratio;
                            k_sum += d.kept.len();
                            if self.setup.record_decisions {
                                self.decisions.push(DecisionRecord {
                                    scheme: self.label.clone(),
                                    seed: self.seed,
                                    round,
                                    client: self.clients[ci].id,
                                    iteration,
                                    d_inst: d.d_inst,
                                    d_hist: d.d_hist,
                                    w_t: d.w_t,
                                    p_t: d.ratio,
                                    k: d.kept.len(),
                                });
                            }
                        }
                        None => k_sum += channels,
                    }
                }
            }
            debug_assert!(self.tracker.is_idle());
            if self.setup.record_scores
                && self.scheme.kind.prunes_channels()
                && self.scheme.scoring == ScoringKind::Lcis
            {
                for c in &self.clients {
                    for ch in 0..channels {
                        self.scores.push(ScoreRecord {
                            scheme: self.label.clone(),
                            seed: self.seed,
                            round,
                            client: c.id,
                            channel: ch,
                            s_inst: c.scores.instantaneous[ch],
                            s_hist: c.scores.historical[ch],
                            s_comb: c.scores.combined[ch],
                        });
                    }
                }
            }
            let (test_loss, test_accuracy) = self.evaluate()?;
            let ledger = self.link.ledger();
            let steps_f = steps.max(1) as f64;
            let row = RoundMetrics {
                scheme: self.label.clone(),
                seed: self.seed,
                round,
                train_loss: loss_sum / steps_f,
                test_loss,
                test_accuracy,
                uplink_payload_bytes: ledger.uplink_payload_bytes,
                uplink_total_bytes: ledger.uplink_bytes,
                downlink_payload_bytes: ledger.downlink_payload_bytes,
                downlink_total_bytes: ledger.downlink_bytes,
                mean_p_t: ratio_sum / steps_f,
                mean_k: k_sum as f64 / steps_f,
            };
            on_round(&row);
            rows.push(row);
        }
        let ledger = *self.link.ledger();
        let trace = self.link.trace().map(<[u8]>::to_vec);
        Ok(SchemeRun {
            scheme: self.label,
            seed: self.seed,
            metrics: rows,
            decisions: self.decisions,
            scores: self.scores,
            ledger,
            model: self.model,
            trace,
        })
    }
}

/// Trains one scheme from a fresh model initialized with `seed`.
pub fn run_scheme(
    setup: &TrainSetup<'_>,
    scheme: &SchemeConfig,
    seed: u64,
    partition: &Partition,
) -> Result<SchemeRun> {
    run_scheme_with(setup, scheme, seed, partition, &mut |_| {})
}

/// [`run_scheme`] with a callback after every round.
pub fn run_scheme_with(
    setup: &TrainSetup<'_>,
    scheme: &SchemeConfig,
    seed: u64,
    partition: &Partition,
    on_round: &mut dyn FnMut(&RoundMetrics),
) -> Result<SchemeRun> {
    Trainer::new(setup, scheme, seed, partition)?.run(on_round)
}

pub fn make_partition(config: &RunConfig, train: &Dataset, seed: u64) -> Result<Partition> {
    let p = &config.partition;
    match p.scheme {
        PartitionScheme::Iid => data::partition_iid(train, p.num_clients, seed),
        PartitionScheme::Dirichlet => data::partition_dirichlet(train, p.num_clients, p.beta, seed),
    }
}

/// Result of a whole configuration: every scheme under every seed.
#[derive(Debug, Serialize)]
pub struct ExperimentReport {
    pub metrics: Vec<RoundMetrics>,
    pub summaries: Vec<SchemeSummary>,
    #[serde(skip)]
    pub decisions: Vec<DecisionRecord>,
    #[serde(skip)]
    pub scores: Vec<ScoreRecord>,
}

/// Accuracy used for `rounds_to_target` in the summary.
pub const DEFAULT_TARGET_ACCURACY: f64 = 0.65;

fn csv<T: Serialize>(rows: &[T], header: &str, fmt: impl Fn(&T) -> String) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&fmt(r));
        out.push('\n');
    }
    out
}

/// Loads data, trains every scheme under every seed, and writes the outputs
/// when an output directory is configured or given.
pub fn run_experiment(
    config: &RunConfig,
    out_dir: Option<&Path>,
    on_round: &mut dyn FnMut(&RoundMetrics),
) -> Result<ExperimentReport> {
    config.validate()?;
    let (train, test) = config.data.load()?;
    let spec = config.model_spec(train.num_classes);
    let mut setup = TrainSetup::new(&train, &test, spec, config.training.clone());
    setup.bounds = config.bounds;
    setup.record_decisions = config.output.decision_log;
    setup.record_scores = config.output.score_dump;
    setup.trace = config.output.trace;
    let out: Option<PathBuf> = out_dir
        .map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone());
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml_string())?;
    }

    let mut metrics_rows = Vec::new();
    let mut decisions = Vec::new();
    let mut scores = Vec::new();
    for &seed in &config.training.seeds {
        let partition = make_partition(config, &train, seed)?;
        if let (Some(dir), true) = (&out, config.output.partition) {
            fs::write(
                dir.join(format!("partition_seed{seed}.json")),
                partition.to_json(),
            )?;
        }
        for scheme in &config.schemes {
            let run = run_scheme_with(&setup, scheme, seed, &partition, on_round)?;
            if let Some(dir) = &out {
                let stem = format!("{}_seed{seed}", file_stem(&run.scheme));
                if config.output.checkpoint {
                    let ck = dir.join("checkpoints");
                    fs::create_dir_all(&ck)?;
                    let f = fs::File::create(ck.join(format!("{stem}.bin")))?;
                    run.model.write_checkpoint(std::io::BufWriter::new(f))?;
                }
                if let Some(trace) = &run.trace {
                    let td = dir.join("traces");
                    fs::create_dir_all(&td)?;
                    fs::write(td.join(format!("{stem}.trace")), trace)?;
                }
            }
            metrics_rows.extend(run.metrics);
            decisions.extend(run.decisions);
            scores.extend(run.scores);
        }
    }
    let summaries = metrics::summarize(&metrics_rows, DEFAULT_TARGET_ACCURACY);
    let report = ExperimentReport {
        metrics: metrics_rows,
        summaries,
        decisions,
        scores,
    };
    if let Some(dir) = &out {
        write_outputs(dir, config, &report)?;
    }
    Ok(report)
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn write_outputs(dir: &Path, config: &RunConfig, report: &ExperimentReport) -> Result<()> {
    fs::write(
        dir.join("metrics.csv"),
        metrics::metrics_csv(&report.metrics),
    )?;
    let summary = serde_json::json!({
        "config": config,
        "schemes": report.summaries,
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    if config.output.decision_log {
        let text = csv(
            &report.decisions,
            "scheme,seed,round,client,iteration,d_inst,d_hist,w_t,p_t,k",
            |d| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    d.scheme,
                    d.seed,
                    d.round,
                    d.client,
                    d.iteration,
                    d.d_inst,
                    d.d_hist,
                    d.w_t,
                    d.p_t,
                    d.k
                )
            },
        );
        fs::write(dir.join("decisions.csv"), text)?;
    }
    if config.output.score_dump {
        let text = csv(
            &report.scores,
            "scheme,seed,round,client,channel,s_inst,s_hist,s_comb",
            |s| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    s.scheme, s.seed, s.round, s.client, s.channel, s.s_inst, s.s_hist, s.s_comb
                )
            },
        );
        fs::write(dir.join("scores.csv"), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    #[test]
    fn tracker_enforces_order() {
        let mut t = StageTracker::new();
        for s in Stage::ORDER {
            t.enter(s).unwrap();
        }
        assert!(t.is_idle());
        t.enter(Stage::ClientForward).unwrap();
        assert!(matches!(
            t.enter(Stage::ServerStep),
            Err(Error::ProtocolOrder(_))
        ));
        let mut t = StageTracker::new();
        assert!(t.enter(Stage::ClientBackward).is_err());
    }

    #[test]
    fn client_seed_follows_content() {
        let d = data::synth_blobs(2, 4, [1, 2, 2], 1).unwrap();
        let twice = Dataset::new(
            Tensor::new(
                vec![16, 1, 2, 2],
                [d.images.data(), d.images.data()].concat(),
            )
            .unwrap(),
            [d.labels.clone(), d.labels.clone()].concat(),
            2,
        )
        .unwrap();
        let a: Vec<usize> = (0..8).collect();
        let b: Vec<usize> = (8..16).collect();
        assert_eq!(client_seed(3, &twice, &a), client_seed(3, &twice, &b));
        assert_ne!(client_seed(3, &twice, &a), client_seed(4, &twice, &a));
        assert_ne!(client_seed(3, &twice, &a), client_seed(3, &twice, &a[1..]));
    }

    fn tiny() -> (Dataset, Dataset, ModelSpec, TrainingConfig) {
        let train = data::synth_blobs(3, 24, [1, 4, 4], 7).unwrap();
        let test = data::synth_blobs(3, 6, [1, 4, 4], 8).unwrap();
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 6,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 3 },
            ],
            cut: 2,
        };
        let training = TrainingConfig {
            rounds: 2,
            batches_per_round: 3,
            batch_size: 8,
            learning_rate: 0.05,
            seeds: vec![1],
            eval_batch_size: 7,
            eval_path: EvalPath::Compressed,
        };
        (train, test, spec, training)
    }

    #[test]
    fn every_scheme_runs_and_counts_bytes() {
        let (train, test, spec, training) = tiny();
        let mut setup = TrainSetup::new(&train, &test, spec, training);
        setup.record_decisions = true;
        let part = data::partition_iid(&train, 2, 1).unwrap();
        for kind in [
            SchemeKind::Standard,
            SchemeKind::RandTopk,
            SchemeKind::Quantization,
            SchemeKind::AcpSl,
            SchemeKind::FixedRatio,
            SchemeKind::RandomRatio,
        ] {
            let run = run_scheme(&setup, &SchemeConfig::new(kind), 1, &part).unwrap();
            assert_eq!(run.metrics.len(), 2);
            assert_eq!(run.ledger.messages, 2 * 2 * 3 * 2);
            let last = run.metrics.last().unwrap();
            assert!(last.uplink_total_bytes > last.uplink_payload_bytes);
            if kind.prunes_channels() {
                assert_eq!(run.decisions.len(), 12);
                assert!(run.decisions.iter().all(|d| (0.6..=0.8).contains(&d.p_t)));
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (train, test, spec, training) = tiny();
        let setup = TrainSetup::new(&train, &test, spec, training);
        let part = data::partition_dirichlet(&train, 3, 0.5, 2).unwrap();
        let s = SchemeConfig::new(SchemeKind::AcpSl);
        let a = run_scheme(&setup, &s, 5, &part).unwrap();
        let b = run_scheme(&setup, &s, 5, &part).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }
}
