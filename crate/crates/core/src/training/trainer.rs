use std::path::PathBuf;

use paca_autograd::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, lr_at, pool_query, save_checkpoint, Adam, ImagePool, LossLog, StepRecord, TrainConfig};
use crate::data::{BatchSampler, ImageTensor, Stage, TransferPair, UnpairedDataset};
use crate::error::{PacaError, Result};
use crate::freezing::{apply_mask, FreezeMask, FreezeSpec};
use crate::losses::{
    cycle_loss_on, gan_loss_on, gan_term, l1_on, pretrain_objective, reg_loss_on, transfer_objective, GanSide,
    LossTerms, Objective,
};
use crate::networks::{CycleGanArch, DiscriminatorNet, GeneratorNet};

const SEED_G_A: u64 = 1;
const SEED_G_B: u64 = 2;
const SEED_D_A: u64 = 3;
const SEED_D_B: u64 = 4;
const SEED_POOL_A: u64 = 5;
const SEED_POOL_B: u64 = 6;
const SEED_SAMPLER: u64 = 7;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub arch: CycleGanArch,
    pub config: TrainConfig,
    pub g_a: GeneratorNet,
    pub g_b: GeneratorNet,
    pub d_a: DiscriminatorNet,
    pub d_b: DiscriminatorNet,
    /// Joint optimizer over G_A then G_B parameters.
    pub opt_g: Adam,
    pub opt_d_a: Adam,
    pub opt_d_b: Adam,
    /// Fakes of domain A, consumed by D_A.
    pub pool_a: ImagePool,
    /// Fakes of domain B, consumed by D_B.
    pub pool_b: ImagePool,
    pub rng_pool_a: ChaCha8Rng,
    pub rng_pool_b: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimization steps.
    pub step: u64,
    pub freeze: Option<FreezeMask>,
}

impl TrainState {
    /// Seed-deterministic initial state.
    pub fn init(arch: CycleGanArch, config: TrainConfig) -> Result<Self> {
        arch.validate()?;
        config.validate()?;
        let s = config.seed;
        let g_a = GeneratorNet::new(arch.generator, derive_seed(s, SEED_G_A))?;
        let g_b = GeneratorNet::new(arch.generator, derive_seed(s, SEED_G_B))?;
        let d_a = DiscriminatorNet::new(arch.discriminator, derive_seed(s, SEED_D_A))?;
        let d_b = DiscriminatorNet::new(arch.discriminator, derive_seed(s, SEED_D_B))?;
        let mut st = Self {
            stage: config.stage,
            arch,
            opt_g: Adam::new(g_a.params.iter().chain(g_b.params.iter()), config.adam_beta1, config.adam_beta2),
            opt_d_a: Adam::new(d_a.params.iter(), config.adam_beta1, config.adam_beta2),
            opt_d_b: Adam::new(d_b.params.iter(), config.adam_beta1, config.adam_beta2),
            g_a,
            g_b,
            d_a,
            d_b,
            pool_a: ImagePool::new(config.pool_size),
            pool_b: ImagePool::new(config.pool_size),
            rng_pool_a: ChaCha8Rng::seed_from_u64(0),
            rng_pool_b: ChaCha8Rng::seed_from_u64(0),
            epoch: 0,
            step: 0,
            freeze: None,
            config,
        };
        st.reset_pools();
        Ok(st)
    }

    fn reset_pools(&mut self) {
        let s = self.config.seed;
        self.pool_a = ImagePool::new(self.config.pool_size);
        self.pool_b = ImagePool::new(self.config.pool_size);
        self.rng_pool_a = ChaCha8Rng::seed_from_u64(derive_seed(s, SEED_POOL_A));
        self.rng_pool_b = ChaCha8Rng::seed_from_u64(derive_seed(s, SEED_POOL_B));
    }

    fn reset_optimizers(&mut self) {
        let (b1, b2) = (self.config.adam_beta1, self.config.adam_beta2);
        self.opt_g = Adam::new(self.g_a.params.iter().chain(self.g_b.params.iter()), b1, b2);
        self.opt_d_a = Adam::new(self.d_a.params.iter(), b1, b2);
        self.opt_d_b = Adam::new(self.d_b.params.iter(), b1, b2);
    }

    pub fn sampler_seed(&self) -> u64 {
        derive_seed(self.config.seed, SEED_SAMPLER)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch as usize >= self.config.total_epochs()
    }

    /// One generator update then D_B then D_A on a single batch.
    pub fn train_step(&mut self, a: &[&ImageTensor], b: &[&ImageTensor], lr: f64) -> Result<(LossTerms, Objective)> {
        let w = self.config.weights.clone();
        let transfer = self.stage == Stage::Transfer;
        let xa_t = ImageTensor::batch(a)?;
        let xb_t = ImageTensor::batch(b)?;

        let mut tape = Tape::<f32>::new();
        let pa = self.g_a.params.bind(&mut tape, true);
        let pb = self.g_b.params.bind(&mut tape, true);
        let qa = self.d_a.params.bind(&mut tape, false);
        let qb = self.d_b.params.bind(&mut tape, false);
        let xa = tape.constant(xa_t.clone());
        let xb = tape.constant(xb_t.clone());
        let fake_b = self.g_a.forward_on(&mut tape, &pa, xa);
        let rec_a = self.g_b.forward_on(&mut tape, &pb, fake_b);
        let fake_a = self.g_b.forward_on(&mut tape, &pb, xb);
        let rec_b = self.g_a.forward_on(&mut tape, &pa, fake_a);
        let s_fb = self.d_b.forward_on(&mut tape, &qb, fake_b);
        let s_fa = self.d_a.forward_on(&mut tape, &qa, fake_a);
        let gan_a = gan_term(&mut tape, s_fb, true, w.gan_mode);
        let gan_b = gan_term(&mut tape, s_fa, true, w.gan_mode);
        let cyc = cycle_loss_on(&mut tape, xa, rec_a, xb, rec_b);
        let cyc_w = tape.scale(cyc, w.lambda_cyc);
        let mut total = tape.add(gan_a, gan_b);
        total = tape.add(total, cyc_w);
        let mut terms = LossTerms {
            gan_g_a: f64::from(tape.item(gan_a)),
            gan_g_b: f64::from(tape.item(gan_b)),
            cycle: f64::from(tape.item(cyc)),
            ..Default::default()
        };
        if w.identity_weight > 0.0 {
            let ia = self.g_a.forward_on(&mut tape, &pa, xb);
            let ib = self.g_b.forward_on(&mut tape, &pb, xa);
            let la = l1_on(&mut tape, ia, xb);
            let lb = l1_on(&mut tape, ib, xa);
            let idt = tape.add(la, lb);
            terms.identity = f64::from(tape.item(idt));
            let idt_w = tape.scale(idt, w.identity_weight);
            total = tape.add(total, idt_w);
        }
        if transfer {
            let reg = reg_loss_on(&mut tape, fake_b, xb, &self.config.ssim, w.c_const);
            terms.reg = Some(f64::from(tape.item(reg)));
            let reg_w = tape.scale(reg, w.lambda_reg);
            total = tape.add(total, reg_w);
        }
        if !f64::from(tape.item(total)).is_finite() {
            return Err(PacaError::Numerical(format!("non-finite generator loss at step {}", self.step)));
        }
        let mut grads = tape.backward(total);
        self.opt_g.tick();
        let n_a = self.g_a.params.len();
        for (i, v) in pa.iter().chain(pb.iter()).enumerate() {
            if let Some(g) = grads.take(*v) {
                let p = if i < n_a { self.g_a.params.at_mut(i) } else { self.g_b.params.at_mut(i - n_a) };
                self.opt_g.update(i, p, &g, lr);
            }
        }
        let fakes_b = ImageTensor::unbatch(tape.value(fake_b))?;
        let fakes_a = ImageTensor::unbatch(tape.value(fake_a))?;
        drop(grads);
        drop(tape);

        let pooled_b: Vec<ImageTensor> =
            fakes_b.into_iter().map(|f| pool_query(&mut self.pool_b, f, &mut self.rng_pool_b)).collect();
        terms.disc_b = disc_step(&mut self.d_b, &mut self.opt_d_b, &xb_t, &pooled_b, lr, &w)?;
        let pooled_a: Vec<ImageTensor> =
            fakes_a.into_iter().map(|f| pool_query(&mut self.pool_a, f, &mut self.rng_pool_a)).collect();
        terms.disc_a = disc_step(&mut self.d_a, &mut self.opt_d_a, &xa_t, &pooled_a, lr, &w)?;

        self.step += 1;
        let totals = if transfer { transfer_objective(&terms, &w) } else { pretrain_objective(&terms, &w) };
        Ok((terms, totals))
    }
}

fn disc_step(
    d: &mut DiscriminatorNet,
    opt: &mut Adam,
    real: &Tensor<f32>,
    fakes: &[ImageTensor],
    lr: f64,
    w: &crate::losses::LossWeights,
) -> Result<f64> {
    let fake = ImageTensor::batch(&fakes.iter().collect::<Vec<_>>())?;
    let mut tape = Tape::<f32>::new();
    let p = d.params.bind(&mut tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake);
    let sr = d.forward_on(&mut tape, &p, r);
    let sf = d.forward_on(&mut tape, &p, f);
    let loss = gan_loss_on(&mut tape, sr, sf, GanSide::Discriminator, w.gan_mode);
    let value = f64::from(tape.item(loss));
    if !value.is_finite() {
        return Err(PacaError::Numerical("non-finite discriminator loss".into()));
    }
    let mut grads = tape.backward(loss);
    opt.tick();
    for (i, v) in p.iter().enumerate() {
        if let Some(g) = grads.take(*v) {
            opt.update(i, d.params.at_mut(i), &g, lr);
        }
    }
    Ok(value)
}

/// Where a run writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct RunIo {
    pub log: Option<PathBuf>,
    /// Periodic checkpoints go to `<dir>/epoch-NNNN`; diagnostics to `<dir>/diagnostic`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub lr: f64,
    pub steps: usize,
    pub mean_terms: LossTerms,
    pub mean_totals: Objective,
}

fn accumulate(acc: &mut (LossTerms, Objective), t: &LossTerms, o: &Objective) {
    let (a, b) = acc;
    a.gan_g_a += t.gan_g_a;
    a.gan_g_b += t.gan_g_b;
    a.cycle += t.cycle;
    a.identity += t.identity;
    a.disc_a += t.disc_a;
    a.disc_b += t.disc_b;
    if let Some(r) = t.reg {
        a.reg = Some(a.reg.unwrap_or(0.0) + r);
    }
    b.gen += o.gen;
    b.disc_a += o.disc_a;
    b.disc_b += o.disc_b;
}

fn averaged(acc: (LossTerms, Objective), n: usize) -> (LossTerms, Objective) {
    let k = n.max(1) as f64;
    let (t, o) = acc;
    (
        LossTerms {
            gan_g_a: t.gan_g_a / k,
            gan_g_b: t.gan_g_b / k,
            cycle: t.cycle / k,
            identity: t.identity / k,
            disc_a: t.disc_a / k,
            disc_b: t.disc_b / k,
            reg: t.reg.map(|r| r / k),
        },
        Objective { gen: o.gen / k, disc_a: o.disc_a / k, disc_b: o.disc_b / k },
    )
}

/// Trains from `state.epoch` up to `until` epochs (capped by the schedule).
/// `observer` sees the state after every completed epoch.
pub fn run_epochs(
    state: &mut TrainState,
    ds: &UnpairedDataset,
    until: usize,
    io: &RunIo,
    observer: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    let until = until.min(state.config.total_epochs());
    let mut sampler = BatchSampler::new(ds, state.stage, state.sampler_seed(), state.config.batch_size)?;
    let mut log = io.log.as_deref().map(LossLog::open).transpose()?;
    let mut stats = Vec::new();
    while (state.epoch as usize) < until {
        let epoch = state.epoch;
        let lr = lr_at(epoch as usize, &state.config)?;
        sampler.seek_epoch(epoch);
        let steps = sampler.batches_per_epoch();
        let mut acc = (LossTerms::default(), Objective::default());
        for _ in 0..steps {
            let batch = sampler.next_batch();
            let (terms, totals) = match state.train_step(&batch.a, &batch.b, lr) {
                Ok(v) => v,
                Err(e @ PacaError::Numerical(_)) => {
                    if let Some(dir) = &io.checkpoint_dir {
                        save_checkpoint(state, &dir.join("diagnostic"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(l) = log.as_mut() {
                l.write(&StepRecord { stage: state.stage, epoch, step: state.step, lr, terms: terms.clone(), totals })?;
            }
            accumulate(&mut acc, &terms, &totals);
        }
        state.epoch += 1;
        let (mean_terms, mean_totals) = averaged(acc, steps);
        stats.push(EpochStats { epoch, lr, steps, mean_terms, mean_totals });
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        let every = state.config.checkpoint_every as u64;
        if let (Some(dir), true) = (&io.checkpoint_dir, every > 0 && state.epoch.is_multiple_of(every)) {
            save_checkpoint(state, &dir.join(format!("epoch-{:04}", state.epoch)))?;
        }
        observer(state)?;
    }
    Ok(stats)
}

/// Pre-trains from the seed-deterministic initialization.
pub fn pretrain(
    ds: &UnpairedDataset,
    arch: CycleGanArch,
    cfg: &TrainConfig,
    io: &RunIo,
) -> Result<(TrainState, Vec<EpochStats>)> {
    if cfg.stage != Stage::Pretrain {
        return Err(PacaError::Config("pretrain needs stage = pretrain".into()));
    }
    if let Some(side) = ds.side() {
        if side != arch.side() {
            return Err(PacaError::Contract(format!(
                "dataset side {side} differs from architecture side {}",
                arch.side()
            )));
        }
    }
    let mut state = TrainState::init(arch, cfg.clone())?;
    let stats = run_epochs(&mut state, ds, cfg.total_epochs(), io, &mut |_| Ok(()))?;
    Ok((state, stats))
}

/// Builds the transfer-stage starting state from a pre-trained one: nets
/// copied, generator mask applied, fresh optimizers and pools.
pub fn transfer_state(base: &TrainState, arch: CycleGanArch, cfg: &TrainConfig) -> Result<TrainState> {
    if base.stage != Stage::Pretrain {
        return Err(PacaError::Contract("transfer needs a pre-training checkpoint as its base".into()));
    }
    if base.arch != arch {
        return Err(PacaError::Contract(format!(
            "base architecture {:?} differs from configured {:?}",
            base.arch, arch
        )));
    }
    if cfg.stage != Stage::Transfer {
        return Err(PacaError::Config("transfer needs stage = transfer".into()));
    }
    cfg.validate()?;
    cfg.ssim.validate(arch.side())?;
    let mut st = base.clone();
    st.stage = Stage::Transfer;
    st.config = cfg.clone();
    st.epoch = 0;
    st.step = 0;
    let spec = cfg.freeze.clone().unwrap_or_else(FreezeSpec::none);
    let mask = spec.build(&st.g_a, &st.g_b)?;
    st.g_a.params = apply_mask(&st.g_a.params, &mask.g_a)?;
    st.g_b.params = apply_mask(&st.g_b.params, &mask.g_b)?;
    st.d_a.params.unfreeze_all();
    st.d_b.params.unfreeze_all();
    st.freeze = Some(mask);
    st.reset_optimizers();
    st.reset_pools();
    Ok(st)
}

/// One-shot transfer on `pair`; one epoch is one step on the pair.
pub fn transfer(
    base: &TrainState,
    pair: &TransferPair,
    arch: CycleGanArch,
    cfg: &TrainConfig,
    io: &RunIo,
    observer: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EpochStats>)> {
    if pair.a.side() != arch.side() || pair.b_prime.side() != arch.side() {
        return Err(PacaError::Contract(format!("transfer pair side differs from architecture side {}", arch.side())));
    }
    let mut st = transfer_state(base, arch, cfg)?;
    let ds = UnpairedDataset::one_shot(pair.clone())?;
    let stats = run_epochs(&mut st, &ds, cfg.total_epochs(), io, observer)?;
    Ok((st, stats))
}
