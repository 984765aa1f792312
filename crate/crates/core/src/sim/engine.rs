use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{self, Activity, Recorder};
use super::{EventKind, SimError, SimEvent, SimOutput, NS};
use crate::config::{CostConfig, PolicyKind, RunConfig};
use crate::cost::{CostModel, ProfileCost};
use crate::history_store::{HistoryStore, PromptId, SuffixTree};
use crate::scheduler::{
    assignment_order, beta_from_history, build_groups, distribute_spare, group_sizes, migration_decision,
    plan_allocation, ActiveGroup, GroupProgress, MigrationDecision, PlanParams, PromptHistory,
};
use crate::spec_engine::{gate_check, BatchGate, ResponseState, SpecCounters};
use crate::trace::{median_len, Trace};

fn to_ns(seconds: f64) -> u64 {
    (seconds * NS).round().max(0.0) as u64
}

/// Decode iteration over `n` sequences that together verify `drafted` draft tokens.
fn iteration_ns(cost: &CostConfig, n: usize, drafted: u64) -> u64 {
    to_ns(cost.iter_base + cost.iter_per_seq * n as f64 + cost.iter_per_token * (n as u64 + drafted) as f64).max(1)
}

/// Prefill before a sequence (re)joins a batch with `generated` tokens already decoded.
fn prefill_ns(cost: &CostConfig, generated: usize) -> u64 {
    to_ns(cost.prefill_per_token * (cost.prompt_len + generated) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Iter { worker: usize },
    Reward { rw: usize, sample: usize },
    TrainChunk { step: u64 },
    Weights { version: u64 },
    ColocatedTrain { step: u64 },
    ColocatedSwitch { step: u64 },
}

struct Sample<'t> {
    id: u64,
    /// Step whose train batch this sample belongs to.
    step: u64,
    /// Step whose ranking group the sample was scheduled in.
    origin_step: u64,
    group: Option<usize>,
    /// Dropped with the tree once the rollout finishes.
    state: Option<ResponseState<'t>>,
    tree: Option<Arc<SuffixTree>>,
    prefill_ns: u64,
    version: Option<u64>,
    migrated: bool,
    finished: bool,
}

impl Sample<'_> {
    fn generated(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.output().len())
    }
}

struct GroupState {
    total: usize,
    /// Rollouts still decoding in this group (finished and migrated-out ones excluded).
    remaining: usize,
    max_hist: f64,
    workers: Vec<usize>,
}

#[derive(Default)]
struct StepState {
    setup: bool,
    grouped: bool,
    attributed: usize,
    finished: usize,
    rewarded: usize,
    consumed: usize,
    minibatch: usize,
    resolved: bool,
    groups: Vec<GroupState>,
    beta: f64,
    carry_in: Vec<usize>,
    train_started: Option<u64>,
}

#[derive(Default)]
struct Worker {
    cur: u64,
    queue: VecDeque<usize>,
    active: Vec<usize>,
    pending: BTreeMap<u64, VecDeque<usize>>,
    running: bool,
    counters: SpecCounters,
    version: Option<u64>,
}

struct Layout {
    /// Prompts in scheduling order.
    prompts: Vec<PromptId>,
    epochs: Vec<u32>,
    /// Leading epochs that only provide history.
    skip: usize,
    steps_per_epoch: usize,
    prompts_per_step: usize,
    total_steps: u64,
    /// (epoch index, prompt index) -> trace indices.
    samples: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Layout {
    fn new(trace: &Trace, cfg: &RunConfig) -> Result<Self, SimError> {
        let epochs = trace.epochs();
        if epochs.is_empty() {
            return Err(SimError::Input("trace is empty".into()));
        }
        let mut ids: BTreeMap<&PromptId, usize> = BTreeMap::new();
        for r in &trace.responses {
            let n = ids.len();
            ids.entry(&r.prompt_id).or_insert(n);
        }
        let mut prompts: Vec<PromptId> = ids.keys().map(|p| (*p).clone()).collect();
        prompts.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.sim.seed));
        let index: BTreeMap<&PromptId, usize> = prompts.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let epoch_index: BTreeMap<u32, usize> = epochs.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let mut samples: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in trace.responses.iter().enumerate() {
            samples.entry((epoch_index[&r.epoch], index[&r.prompt_id])).or_default().push(i);
        }
        let extra = (cfg.sim.prompts_per_step as f64 * cfg.sim.oversample_pct / 100.0).ceil() as usize;
        let per_step = cfg.sim.prompts_per_step + extra;
        let steps_per_epoch = prompts.len() / per_step;
        if steps_per_epoch == 0 {
            return Err(SimError::Input(format!(
                "trace has {} prompts, fewer than the {per_step} scheduled per step",
                prompts.len()
            )));
        }
        let skip = cfg.sim.history_epochs;
        if skip >= epochs.len() {
            return Err(SimError::Input(format!(
                "sim.history_epochs = {skip} leaves none of the trace's {} epochs to simulate",
                epochs.len()
            )));
        }
        let available = (steps_per_epoch * (epochs.len() - skip)) as u64;
        let total_steps = match cfg.sim.steps as u64 {
            0 => available,
            n if n <= available => n,
            n => return Err(SimError::Input(format!("{n} steps requested but the trace provides {available}"))),
        };
        Ok(Self { prompts, epochs, skip, steps_per_epoch, prompts_per_step: per_step, total_steps, samples })
    }

    fn epoch_index(&self, step: u64) -> usize {
        self.skip + (step as usize - 1) / self.steps_per_epoch
    }

    fn step_prompts(&self, step: u64) -> std::ops::Range<usize> {
        let slot = (step as usize - 1) % self.steps_per_epoch;
        slot * self.prompts_per_step..(slot + 1) * self.prompts_per_step
    }

    fn samples_of(&self, epoch_index: usize, prompt: usize) -> &[usize] {
        self.samples.get(&(epoch_index, prompt)).map_or(&[], |v| v.as_slice())
    }
}

struct Sim<'t> {
    trace: &'t Trace,
    cfg: &'t RunConfig,
    layout: Layout,
    gate: BatchGate,
    profile: Option<ProfileCost>,
    store: HistoryStore,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    samples: Vec<Sample<'t>>,
    steps: Vec<StepState>,
    workers: Vec<Worker>,
    reward_free: Vec<bool>,
    reward_queue: VecDeque<usize>,
    weights_ready: u64,
    colocated_ready: u64,
    train_busy: bool,
    next_train: u64,
    last_train_ns: Option<u64>,
    retry_all: bool,
    events: Vec<SimEvent>,
    rec: Recorder,
    spec_total: SpecCounters,
}

/// Simulate `trace` under `cfg` and collect metrics, the event log and the
/// per-worker timeline.
pub fn run(trace: &Trace, cfg: &RunConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let layout = Layout::new(trace, cfg)?;
    let profile = match &cfg.cost.profile {
        Some(p) => Some(ProfileCost::from_path(p)?),
        None => None,
    };
    let w = cfg.cluster.rollout_workers;
    let steps = (0..=layout.total_steps + 1).map(|_| StepState::default()).collect();
    let mut sim = Sim {
        trace,
        cfg,
        gate: cfg.spec.gate().map_err(|e| SimError::Input(e.to_string()))?,
        profile,
        store: HistoryStore::new(4),
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        samples: Vec::new(),
        steps,
        workers: (0..w).map(|_| Worker::default()).collect(),
        reward_free: vec![true; cfg.cluster.reward_workers],
        reward_queue: VecDeque::new(),
        weights_ready: 0,
        colocated_ready: 1,
        train_busy: false,
        next_train: 1,
        last_train_ns: None,
        retry_all: false,
        events: Vec::new(),
        rec: Recorder::new(w, cfg.cluster.reward_workers, layout.total_steps),
        spec_total: SpecCounters::default(),
        layout,
    };
    sim.steps[0].resolved = true;
    for w in 0..sim.workers.len() {
        sim.try_advance(w)?;
    }
    sim.flush_retries()?;
    while let Some(Reverse((t, _, ev))) = sim.heap.pop() {
        sim.now = t;
        sim.handle(ev)?;
        sim.flush_retries()?;
    }
    sim.finish()
}

impl<'t> Sim<'t> {
    fn policy(&self) -> PolicyKind {
        self.cfg.sim.policy
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn log(&mut self, kind: EventKind, step: u64, worker: Option<usize>, sample: Option<u64>) -> &mut SimEvent {
        self.events.push(SimEvent { t_ns: self.now, kind, step, worker, sample, weight_version: None, detail: None });
        self.events.last_mut().expect("just pushed")
    }

    fn flush_retries(&mut self) -> Result<(), SimError> {
        while self.retry_all {
            self.retry_all = false;
            for w in 0..self.workers.len() {
                self.try_advance(w)?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Iter { worker } => self.on_iteration_done(worker)?,
            Ev::Reward { rw, sample } => self.on_reward_done(rw, sample),
            Ev::TrainChunk { step } => {
                self.train_busy = false;
                self.try_train(step);
            }
            Ev::Weights { version } => {
                self.weights_ready = self.weights_ready.max(version);
                self.retry_all = true;
            }
            Ev::ColocatedTrain { step } => {
                self.train_finished(step);
                if step < self.layout.total_steps {
                    let train = self.now - self.steps[step as usize].train_started.unwrap_or(self.now);
                    let switch = to_ns(train as f64 / NS * self.cfg.cost.context_switch_frac);
                    for w in 0..self.workers.len() {
                        self.rec.rollout_busy(w, self.now, self.now + switch, Activity::Switch);
                    }
                    self.schedule(self.now + switch, Ev::ColocatedSwitch { step });
                }
            }
            Ev::ColocatedSwitch { step } => {
                self.colocated_ready = step + 1;
                self.weights_ready = self.weights_ready.max(step);
                self.retry_all = true;
            }
        }
        Ok(())
    }

    /// Weight version rollouts of `step` decode with.
    fn version_for(&self, step: u64) -> u64 {
        match self.policy() {
            PolicyKind::Colocated => step - 1,
            _ => step.saturating_sub(2),
        }
    }

    fn step_is_grouped(&self, step: u64) -> bool {
        self.policy().uses_groups() && self.layout.epoch_index(step) >= 1
    }

    fn eligible(&self, step: u64) -> bool {
        match self.policy() {
            PolicyKind::Colocated => self.colocated_ready >= step,
            _ => {
                let barrier = !self.step_is_grouped(step) && !self.steps[step as usize - 1].resolved;
                !barrier && self.weights_ready >= self.version_for(step)
            }
        }
    }

    fn try_advance(&mut self, w: usize) -> Result<(), SimError> {
        loop {
            let worker = &self.workers[w];
            if worker.running {
                return Ok(());
            }
            if !worker.queue.is_empty() || !worker.active.is_empty() {
                self.start_iteration(w);
                return Ok(());
            }
            let cur = worker.cur;
            if cur > 0 && self.rec.finish(cur, w).is_none() {
                self.rec.set_finish(cur, w, self.now);
                self.retry_all = true;
            }
            let next = cur + 1;
            if next > self.layout.total_steps || !self.eligible(next) {
                return Ok(());
            }
            self.ensure_setup(next)?;
            let version = self.version_for(next);
            let worker = &mut self.workers[w];
            worker.cur = next;
            worker.queue = worker.pending.remove(&next).unwrap_or_default();
            worker.counters = SpecCounters::default();
            let reload = worker.version != Some(version);
            worker.version = Some(version);
            self.rec.set_start(next, w, self.now);
            self.log(EventKind::StepBoundary, next, Some(w), None);
            if reload {
                self.log(EventKind::WeightUpdate, next, Some(w), None).weight_version = Some(version);
            }
        }
    }

    fn ensure_setup(&mut self, step: u64) -> Result<(), SimError> {
        if self.steps[step as usize].setup {
            return Ok(());
        }
        let ei = self.layout.epoch_index(step);
        let range = self.layout.step_prompts(step);
        let prompts: Vec<usize> = range.collect();
        let trees = self.load_history(ei, &prompts)?;

        let mut per_prompt: Vec<Vec<usize>> = Vec::with_capacity(prompts.len());
        for (&p, tree) in prompts.iter().zip(&trees) {
            let ids: Vec<usize> = self.layout.samples_of(ei, p).to_vec();
            let mut created = Vec::with_capacity(ids.len());
            for id in ids {
                let truth = &self.trace.responses[id].tokens;
                let spec = &self.cfg.spec;
                let state = ResponseState::new(
                    truth,
                    spec.window().map_err(|e| SimError::Input(e.to_string()))?,
                    spec.prefix().map_err(|e| SimError::Input(e.to_string()))?,
                );
                self.samples.push(Sample {
                    id: id as u64,
                    step,
                    origin_step: step,
                    group: None,
                    state: Some(state),
                    tree: tree.clone(),
                    prefill_ns: prefill_ns(&self.cfg.cost, 0),
                    version: None,
                    migrated: false,
                    finished: false,
                });
                created.push(self.samples.len() - 1);
            }
            per_prompt.push(created);
        }
        let count: usize = per_prompt.iter().map(Vec::len).sum();
        let nw = self.workers.len();

        if self.step_is_grouped(step) {
            self.setup_groups(step, ei, &prompts, &per_prompt)?;
        } else {
            let all: Vec<usize> = per_prompt.into_iter().flatten().collect();
            let workers: Vec<usize> = (0..nw).collect();
            self.deal(step, &all, &workers);
            self.steps[step as usize].beta = self.cfg.sim.migration.beta;
        }
        let st = &mut self.steps[step as usize];
        st.setup = true;
        st.attributed += count;
        st.minibatch = count.div_ceil(self.cfg.cost.train_minibatches).max(1);
        let carry = std::mem::take(&mut st.carry_in);
        for s in carry {
            self.place_carry(step, s);
        }
        Ok(())
    }

    /// Snapshot of each prompt's previous-epoch tree, indexing it first if needed.
    fn load_history(&mut self, ei: usize, prompts: &[usize]) -> Result<Vec<Option<Arc<SuffixTree>>>, SimError> {
        if ei == 0 || !self.cfg.spec.enabled {
            return Ok(vec![None; prompts.len()]);
        }
        let prev_epoch = self.layout.epochs[ei - 1];
        let mut tickets = Vec::new();
        for &p in prompts {
            let pid = &self.layout.prompts[p];
            if self.store.snapshot(pid).is_some_and(|t| t.epoch() >= prev_epoch) {
                continue;
            }
            let responses: Vec<_> =
                self.layout.samples_of(ei - 1, p).iter().map(|&i| self.trace.responses[i].clone()).collect();
            if responses.is_empty() {
                continue;
            }
            tickets.push(self.store.ingest_epoch(pid.clone(), prev_epoch, responses)?);
        }
        for t in tickets {
            t.wait();
        }
        Ok(prompts.iter().map(|&p| self.store.snapshot(&self.layout.prompts[p])).collect())
    }

    fn history_of(&self, ei: usize, prompt: usize) -> Option<(f64, f64)> {
        let mut lens: Vec<usize> =
            self.layout.samples_of(ei, prompt).iter().map(|&i| self.trace.responses[i].generated_len()).collect();
        if lens.is_empty() {
            return None;
        }
        let m = median_len(&mut lens);
        Some((m, *lens.last().expect("non-empty") as f64))
    }

    fn setup_groups(
        &mut self,
        step: u64,
        ei: usize,
        prompts: &[usize],
        per_prompt: &[Vec<usize>],
    ) -> Result<(), SimError> {
        let n = self.cfg.cluster.n_groups;
        let nw = self.workers.len();
        let history: Vec<PromptHistory> = prompts
            .iter()
            .map(|&p| {
                let (median, max) = self.history_of(ei - 1, p).unwrap_or((0.0, 0.0));
                PromptHistory::new(self.layout.prompts[p].clone(), median, max)
            })
            .collect();
        let mut groups = build_groups(&history, n).map_err(|e| SimError::Infeasible { step, reason: e.to_string() })?;
        let slot_of: BTreeMap<&PromptId, usize> =
            prompts.iter().enumerate().map(|(i, &p)| (&self.layout.prompts[p], i)).collect();
        let members: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.prompt_ids.iter().flat_map(|pid| per_prompt[slot_of[pid]].iter().copied()).collect())
            .collect();

        let counts = match self.policy() {
            PolicyKind::HistopipeTwoTier => self.plan_counts(step, &groups, &members)?,
            _ => group_sizes(nw, n),
        };

        let mut next_worker = 0;
        let mut states: Vec<GroupState> = groups
            .iter()
            .zip(&members)
            .map(|(g, m)| GroupState {
                total: m.len(),
                remaining: m.len(),
                max_hist: g.max_hist_len,
                workers: Vec::new(),
            })
            .collect();
        for g in assignment_order(step, n) {
            let ws: Vec<usize> = (next_worker..next_worker + counts[g]).collect();
            next_worker += counts[g];
            groups[g].assigned_workers = ws.len();
            for &s in &members[g] {
                self.samples[s].group = Some(g);
            }
            self.deal(step, &members[g], &ws);
            states[g].workers = ws;
        }

        let beta = if ei >= 2 {
            let rates: Vec<f64> = prompts
                .iter()
                .filter_map(|&p| {
                    let (m1, _) = self.history_of(ei - 1, p)?;
                    let (m0, _) = self.history_of(ei - 2, p)?;
                    (m0 > 0.0).then(|| m1 / m0)
                })
                .collect();
            let pol = &self.cfg.sim.migration;
            beta_from_history(&rates, pol.percentile, pol.beta_floor)
        } else {
            self.cfg.sim.migration.beta
        };
        let st = &mut self.steps[step as usize];
        st.grouped = true;
        st.groups = states;
        st.beta = beta;
        Ok(())
    }

    fn plan_counts(
        &self,
        step: u64,
        groups: &[crate::scheduler::RankingGroup],
        members: &[Vec<usize>],
    ) -> Result<Vec<usize>, SimError> {
        let nw = self.workers.len();
        let n = groups.len();
        let sim = &self.cfg.sim;
        let max_wks = if sim.max_wks == 0 { (nw + 1).saturating_sub(n) } else { sim.max_wks };
        let params = PlanParams { min_wks: sim.min_wks, max_wks, precision: sim.plan_precision };
        let lens: Vec<f64> = groups.iter().map(|g| g.representative_len).collect();
        let t_train = match self.last_train_ns {
            Some(ns) => ns as f64 / NS,
            None => self.cfg.cost.train_time(members.iter().map(Vec::len).sum()),
        };
        let c = &self.spec_total;
        let accepted_per_pass =
            if c.iterations() == 0 { 0.0 } else { c.tokens_total as f64 / c.iterations() as f64 - 1.0 };
        let group_samples = members.iter().map(Vec::len).max().unwrap_or(1);
        let analytic = self.cfg.cost.planning_model(group_samples, accepted_per_pass);
        let model: &dyn Fn(f64, usize) -> f64 = match &self.profile {
            Some(p) => &|l, k| p.tau(l, k),
            None => &|l, k| analytic.tau(l, k),
        };
        let plan = plan_allocation(&lens, nw, t_train, &params, &model)
            .map_err(|e| SimError::Infeasible { step, reason: e.to_string() })?;
        if !plan.feasible {
            return Err(SimError::Infeasible {
                step,
                reason: format!("no allocation of {nw} workers meets the targets"),
            });
        }
        let mut counts = plan.per_group_workers;
        distribute_spare(&mut counts, &lens, nw, max_wks, &model);
        Ok(counts)
    }

    /// Split `samples` into contiguous chunks over `workers` for `step`.
    fn deal(&mut self, step: u64, samples: &[usize], workers: &[usize]) {
        if workers.is_empty() {
            return;
        }
        let mut it = samples.iter();
        for (&w, size) in workers.iter().zip(group_sizes(samples.len(), workers.len())) {
            let q = self.workers[w].pending.entry(step).or_default();
            q.extend(it.by_ref().take(size));
        }
    }

    fn load(&self, w: usize, step: u64) -> usize {
        let wk = &self.workers[w];
        if wk.cur == step {
            wk.queue.len() + wk.active.len()
        } else {
            wk.pending.get(&step).map_or(0, VecDeque::len)
        }
    }

    /// Put an inter-step migrated sample on the least-loaded worker of the
    /// shortest group of `step`.
    fn place_carry(&mut self, step: u64, s: usize) {
        let st = &self.steps[step as usize];
        let open = |ws: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
            ws.filter(|&w| self.workers[w].cur <= step).collect()
        };
        let mut pool = match st.groups.first() {
            Some(g) => open(&mut g.workers.iter().copied()),
            None => Vec::new(),
        };
        if pool.is_empty() {
            pool = open(&mut (0..self.workers.len()));
        }
        let w = pool.into_iter().min_by_key(|&w| (self.load(w, step), w)).expect("a worker still before the step");
        self.samples[s].origin_step = step;
        if self.steps[step as usize].grouped {
            self.samples[s].group = Some(0);
            let g = &mut self.steps[step as usize].groups[0];
            g.total += 1;
            g.remaining += 1;
        }
        self.enqueue(w, step, s);
    }

    fn enqueue(&mut self, w: usize, step: u64, s: usize) {
        if self.workers[w].cur == step {
            self.workers[w].queue.push_back(s);
            self.rec.clear_finish(step, w);
            self.retry_all = true;
        } else {
            self.workers[w].pending.entry(step).or_default().push_back(s);
        }
    }

    fn start_iteration(&mut self, w: usize) {
        let max_batch = self.cfg.cluster.max_batch;
        let step = self.workers[w].cur;
        let version = self.version_for(step);
        while self.workers[w].active.len() < max_batch {
            let Some(s) = self.workers[w].queue.pop_front() else { break };
            self.samples[s].version.get_or_insert(version);
            self.workers[w].active.push(s);
        }
        let n = self.workers[w].active.len();
        let acceptance = {
            let c = &self.workers[w].counters;
            if c.tokens_speculated == 0 {
                1.0
            } else {
                c.acceptance_rate()
            }
        };
        let speculate = self.cfg.spec.enabled && gate_check(&self.gate, n, acceptance);
        let mut drafted = 0u64;
        let mut prefill = 0u64;
        let active = std::mem::take(&mut self.workers[w].active);
        for &s in &active {
            let sample = &mut self.samples[s];
            prefill += std::mem::take(&mut sample.prefill_ns);
            let tree = sample.tree.as_deref();
            let state = sample.state.as_mut().expect("active samples are unfinished");
            let o = state.step(tree, speculate).expect("active samples are incomplete");
            drafted += o.drafted as u64;
            self.workers[w].counters.record(&o);
            self.spec_total.record(&o);
        }
        self.workers[w].active = active;
        let dt = iteration_ns(&self.cfg.cost, n, drafted) + prefill;
        self.workers[w].running = true;
        self.rec.rollout_busy(w, self.now, self.now + dt, Activity::Rollout);
        self.schedule(self.now + dt, Ev::Iter { worker: w });
    }

    fn on_iteration_done(&mut self, w: usize) -> Result<(), SimError> {
        self.workers[w].running = false;
        let active = std::mem::take(&mut self.workers[w].active);
        let mut still = Vec::with_capacity(active.len());
        for s in active {
            if self.samples[s].state.as_ref().is_some_and(|st| st.is_complete()) {
                self.finish_sample(w, s);
            } else {
                still.push(s);
            }
        }
        self.workers[w].active = still;
        if self.migration_active(self.workers[w].cur) {
            self.check_migrations(w);
        }
        self.try_advance(w)
    }

    fn finish_sample(&mut self, w: usize, s: usize) {
        let sample = &mut self.samples[s];
        sample.finished = true;
        sample.state = None;
        sample.tree = None;
        let (step, origin, group, id, version) =
            (sample.step, sample.origin_step, sample.group, sample.id, sample.version);
        self.log(EventKind::RolloutFinish, step, Some(w), Some(id)).weight_version = version;
        self.steps[step as usize].finished += 1;
        if let Some(g) = group {
            if let Some(gs) = self.steps[origin as usize].groups.get_mut(g) {
                gs.remaining -= 1;
            }
        }
        self.dispatch_reward(s);
        self.check_resolved(step);
    }

    fn migration_active(&self, step: u64) -> bool {
        self.cfg.sim.migration_enabled && step > 0 && self.steps[step as usize].grouped
    }

    fn check_migrations(&mut self, w: usize) {
        let step = self.workers[w].cur;
        let n = self.cfg.cluster.n_groups;
        let mut policy = self.cfg.sim.migration;
        policy.beta = self.steps[step as usize].beta;
        let candidates: Vec<usize> = self.workers[w].active.clone();
        for s in candidates {
            let sample = &self.samples[s];
            if sample.migrated || sample.origin_step != step {
                continue;
            }
            let Some(g) = sample.group else { continue };
            let st = &self.steps[step as usize];
            let gs = &st.groups[g];
            let generated = sample.generated();
            // Cheap pre-check of the thresholds before collecting the other groups' loads.
            let in_tail = gs.remaining as f64 <= policy.alpha / 100.0 * gs.total as f64;
            if !in_tail || generated as f64 <= policy.beta * gs.max_hist {
                continue;
            }
            let progress = GroupProgress {
                index: g,
                num_groups: n,
                total: gs.total,
                completed: gs.total - gs.remaining,
                max_hist_len: gs.max_hist,
            };
            let active: Vec<ActiveGroup> = st
                .groups
                .iter()
                .enumerate()
                .filter(|(i, o)| *i != g && o.remaining > 0 && o.workers.iter().any(|&x| self.workers[x].cur == step))
                .map(|(i, o)| ActiveGroup { index: i, load: o.remaining as f64 / o.workers.len().max(1) as f64 })
                .collect();
            let decision = migration_decision(&progress, generated, &policy, &active);
            match decision {
                MigrationDecision::None => {}
                MigrationDecision::IntraStep { target_group } => self.migrate_intra(w, s, step, g, target_group),
                MigrationDecision::InterStep => {
                    if step < self.layout.total_steps {
                        self.migrate_inter(w, s, step, g);
                    }
                }
            }
        }
    }

    fn detach(&mut self, w: usize, s: usize) {
        self.workers[w].active.retain(|&x| x != s);
        let sample = &mut self.samples[s];
        sample.migrated = true;
        sample.prefill_ns = prefill_ns(&self.cfg.cost, sample.generated());
    }

    fn migrate_intra(&mut self, w: usize, s: usize, step: u64, from: usize, to: usize) {
        let target = self.steps[step as usize].groups[to]
            .workers
            .iter()
            .copied()
            .filter(|&x| self.workers[x].cur == step)
            .min_by_key(|&x| (self.load(x, step), x));
        let Some(target) = target else { return };
        self.detach(w, s);
        let st = &mut self.steps[step as usize];
        st.groups[from].remaining -= 1;
        st.groups[to].remaining += 1;
        st.groups[to].total += 1;
        self.samples[s].group = Some(to);
        self.enqueue(target, step, s);
        self.rec.migrated(false);
        let id = self.samples[s].id;
        let e = self.log(EventKind::Migration, step, Some(target), Some(id));
        e.detail = Some(format!("intra_step from_worker={w} from_group={from} to_group={to}"));
    }

    fn migrate_inter(&mut self, w: usize, s: usize, step: u64, from: usize) {
        self.detach(w, s);
        let next = step + 1;
        {
            let st = &mut self.steps[step as usize];
            st.groups[from].remaining -= 1;
            st.attributed -= 1;
        }
        self.steps[next as usize].attributed += 1;
        let sample = &mut self.samples[s];
        sample.step = next;
        sample.version = None;
        let id = sample.id;
        self.rec.migrated(true);
        let e = self.log(EventKind::Migration, step, Some(w), Some(id));
        e.detail = Some(format!("inter_step from_group={from} to_step={next}"));
        if self.steps[next as usize].setup {
            self.place_carry(next, s);
        } else {
            self.steps[next as usize].carry_in.push(s);
        }
        self.check_resolved(step);
    }

    fn check_resolved(&mut self, mut step: u64) {
        while step <= self.layout.total_steps {
            let prev_resolved = self.steps[step as usize - 1].resolved;
            let st = &mut self.steps[step as usize];
            if st.resolved || !st.setup || !prev_resolved || st.finished != st.attributed {
                return;
            }
            st.resolved = true;
            self.retry_all = true;
            self.try_train(step);
            step += 1;
        }
    }

    fn dispatch_reward(&mut self, s: usize) {
        match self.reward_free.iter().position(|&f| f) {
            Some(rw) => self.start_reward(rw, s),
            None => self.reward_queue.push_back(s),
        }
    }

    fn start_reward(&mut self, rw: usize, s: usize) {
        self.reward_free[rw] = false;
        let dt = to_ns(self.cfg.cost.reward_per_sample);
        self.rec.reward_busy(rw, self.now, self.now + dt);
        self.schedule(self.now + dt, Ev::Reward { rw, sample: s });
    }

    fn on_reward_done(&mut self, rw: usize, s: usize) {
        self.reward_free[rw] = true;
        let (step, id) = (self.samples[s].step, self.samples[s].id);
        self.log(EventKind::RewardDone, step, None, Some(id));
        self.steps[step as usize].rewarded += 1;
        if let Some(next) = self.reward_queue.pop_front() {
            self.start_reward(rw, next);
        }
        self.try_train(step);
    }

    fn try_train(&mut self, _hint: u64) {
        if self.policy() == PolicyKind::Colocated {
            self.try_colocated_train();
            return;
        }
        while !self.train_busy && self.next_train <= self.layout.total_steps {
            let k = self.next_train;
            let st = &self.steps[k as usize];
            if !st.setup {
                return;
            }
            let all_in = st.resolved && st.rewarded == st.attributed;
            let avail = st.rewarded - st.consumed;
            if all_in && avail == 0 {
                self.train_finished(k);
                self.next_train += 1;
                continue;
            }
            let take = if avail >= st.minibatch {
                st.minibatch
            } else if all_in {
                avail
            } else {
                0
            };
            if take == 0 {
                return;
            }
            let k_cost = &self.cfg.cost;
            let dt =
                to_ns(k_cost.train_fixed / k_cost.train_minibatches as f64 + k_cost.train_per_sample * take as f64);
            let st = &mut self.steps[k as usize];
            st.consumed += take;
            st.train_started.get_or_insert(self.now);
            self.train_busy = true;
            self.rec.train_busy(self.now, self.now + dt);
            self.schedule(self.now + dt, Ev::TrainChunk { step: k });
        }
    }

    fn try_colocated_train(&mut self) {
        let k = self.next_train;
        if k > self.layout.total_steps || self.train_busy {
            return;
        }
        let st = &self.steps[k as usize];
        if !(st.setup && st.resolved && st.rewarded == st.attributed) {
            return;
        }
        let n = st.attributed;
        let dt = to_ns(self.cfg.cost.train_time(n));
        let st = &mut self.steps[k as usize];
        st.consumed = n;
        st.train_started = Some(self.now);
        self.train_busy = true;
        for w in 0..self.workers.len() {
            self.rec.rollout_busy(w, self.now, self.now + dt, Activity::Train);
        }
        self.rec.stage_train(self.now, self.now + dt);
        self.schedule(self.now + dt, Ev::ColocatedTrain { step: k });
    }

    fn train_finished(&mut self, k: u64) {
        let st = &self.steps[k as usize];
        let started = st.train_started.unwrap_or(self.now);
        let trained = st.consumed;
        self.last_train_ns = Some(self.now - started);
        self.rec.trained(trained, self.now);
        self.log(EventKind::TrainDone, k, None, None).detail = Some(format!("samples={trained}"));
        if self.policy() == PolicyKind::Colocated {
            self.train_busy = false;
            self.next_train += 1;
        } else {
            let delay = to_ns(self.cfg.cluster.weight_propagation_delay);
            self.schedule(self.now + delay, Ev::Weights { version: k });
        }
    }

    fn finish(self) -> Result<SimOutput, SimError> {
        let total = self.layout.total_steps;
        if self.next_train <= total {
            return Err(SimError::Input(format!(
                "simulation stalled before training step {} of {total}",
                self.next_train
            )));
        }
        let stuck = self.samples.iter().filter(|s| !s.finished).count();
        if stuck > 0 {
            return Err(SimError::Input(format!("{stuck} rollouts never finished")));
        }
        let (report, timeline) = metrics::build(self.cfg, self.rec, self.spec_total, self.samples.len());
        Ok(SimOutput { report, events: self.events, timeline })
    }
}
