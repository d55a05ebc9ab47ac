//! Adversarial training: the log-loss min-max objective and its
//! non-saturating variant, the critic (non-log) objective with weight
//! clipping, and the epoch loop with cosine learning-rate decay.

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{batch_indices, gather_batch, Dataset};
use crate::error::Error;
use crate::imgio;
use crate::model::{sample_normal, Discriminator, Generator};
use crate::optim::{cosine_lr, grad_norm_clip, weight_clip, Optimizer};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

/// Clamp inside the losses' logs; keeps saturated sigmoids finite.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanMode {
    Vanilla,
    Wgan,
}

/// How the critic is kept in check in wgan mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Clamp discriminator weights to `[-c, c]` after each critic update.
    Weights,
    /// Clip the gradient's global L2 norm to `c` before each critic update.
    GradNorm,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: GanMode,
    pub conditional: bool,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Critic updates per generator update (wgan only).
    pub n_critic: usize,
    /// Clip constant `c`.
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub opt_eps: f64,
    /// RMSProp mean-square decay (wgan optimizer).
    pub rms_decay: f64,
    pub seed: u64,
    pub lr_min: f64,
    /// Cosine horizon in epochs; defaults to `epochs` when `None`.
    pub lr_horizon: Option<usize>,
    /// Use the literal saturating generator loss instead of the
    /// non-saturating default.
    pub saturating_g_loss: bool,
    /// Write a sample grid every N epochs (0 = never).
    pub sample_every: usize,
    /// Write checkpoints every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: GanMode::Vanilla,
            conditional: false,
            lr: 2e-4,
            batch: 256,
            epochs: 50,
            n_critic: 5,
            clip: 0.01,
            clip_mode: ClipMode::Weights,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            opt_eps: 1e-8,
            rms_decay: 0.99,
            seed: 0,
            lr_min: 0.0,
            lr_horizon: None,
            saturating_g_loss: false,
            sample_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.lr <= 0.0 || self.batch == 0 || self.epochs == 0 || self.n_critic == 0 {
            return Err(Error::Config("lr, batch, epochs and n_critic must be positive".into()));
        }
        if self.clip <= 0.0 {
            return Err(Error::Config("clip constant must be positive".into()));
        }
        Ok(())
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// Discriminator side of the log-loss objective:
/// `-mean(log D(x)) - mean(log(1 - D(G(z))))`.
pub fn vanilla_d_loss<E: crate::tensor::Elem>(tape: &mut Tape<E>, d_real: Var, d_fake: Var) -> Var {
    let dr = tape.clamp(d_real, LOG_EPS, 1.0);
    let log_dr = tape.log(dr);
    let real_term = tape.mean_all(log_dr);
    let neg_df = tape.mul_const(d_fake, -1.0);
    let one_minus = tape.add_const(neg_df, 1.0);
    let omc = tape.clamp(one_minus, LOG_EPS, 1.0);
    let log_om = tape.log(omc);
    let fake_term = tape.mean_all(log_om);
    let sum = tape.add(real_term, fake_term);
    tape.mul_const(sum, -1.0)
}

/// Generator side: non-saturating `-mean(log D(G(z)))` by default, or the
/// literal `mean(log(1 - D(G(z))))` when `saturating`.
pub fn vanilla_g_loss<E: crate::tensor::Elem>(tape: &mut Tape<E>, d_fake: Var, saturating: bool) -> Var {
    if saturating {
        let neg_df = tape.mul_const(d_fake, -1.0);
        let one_minus = tape.add_const(neg_df, 1.0);
        let omc = tape.clamp(one_minus, LOG_EPS, 1.0);
        let log_om = tape.log(omc);
        tape.mean_all(log_om)
    } else {
        let df = tape.clamp(d_fake, LOG_EPS, 1.0);
        let log_df = tape.log(df);
        let m = tape.mean_all(log_df);
        tape.mul_const(m, -1.0)
    }
}

/// Both sides of the log-loss game from one pair of score batches.
/// Vanilla scores must lie in `[0, 1]`.
pub fn gan_losses<E: crate::tensor::Elem>(
    tape: &mut Tape<E>,
    d_real: Var,
    d_fake: Var,
    saturating_g: bool,
) -> Result<(Var, Var), Error> {
    for &v in tape.value(d_real).iter().chain(tape.value(d_fake)) {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Numeric(format!(
                "vanilla-mode score {f} outside [0, 1]; did the discriminator skip its sigmoid?"
            )));
        }
    }
    Ok((
        vanilla_d_loss(tape, d_real, d_fake),
        vanilla_g_loss(tape, d_fake, saturating_g),
    ))
}

/// Critic losses, the non-log variant:
/// `loss_D = mean(D(G(z))) - mean(D(x))`, `loss_G = -mean(D(G(z)))`.
pub fn wgan_losses<E: crate::tensor::Elem>(tape: &mut Tape<E>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let mf = tape.mean_all(d_fake);
    let mr = tape.mean_all(d_real);
    let loss_d = tape.sub(mf, mr);
    let loss_g = tape.mul_const(mf, -1.0);
    (loss_d, loss_g)
}

pub fn wgan_d_loss<E: crate::tensor::Elem>(tape: &mut Tape<E>, d_real: Var, d_fake: Var) -> Var {
    let mf = tape.mean_all(d_fake);
    let mr = tape.mean_all(d_real);
    tape.sub(mf, mr)
}

pub fn wgan_g_loss<E: crate::tensor::Elem>(tape: &mut Tape<E>, d_fake: Var) -> Var {
    let mf = tape.mean_all(d_fake);
    tape.mul_const(mf, -1.0)
}

// ── run log ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_d: f32,
    pub loss_g: f32,
    /// Wall time; excluded from determinism comparisons.
    pub wall_ms: u64,
    /// End-of-epoch `|mean D(x) - mean D(G(z))|` on a fixed probe batch.
    pub w_gap: f32,
}

impl EpochRecord {
    /// The spec'd tab-separated run-log line.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.*e}\t{}\t{}\t{}",
            self.epoch, 6, self.lr, self.loss_d, self.loss_g, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub d_updates: u64,
    pub g_updates: u64,
}

/// Step-level events for tests and monitoring.
pub enum StepEvent {
    /// After one critic/discriminator update (and its clip, in wgan mode).
    DiscUpdate { disc_max_abs: f64 },
    GenUpdate,
}

// ── the loop ────────────────────────────────────────────────────────────

struct NoiseSource {
    rng: ChaCha8Rng,
    n_classes: usize,
}

impl NoiseSource {
    fn batch<const STREAM: u64>(seed: u64, n_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM);
        NoiseSource { rng, n_classes }
    }

    fn draw(&mut self, batch: usize, noise_dim: usize, conditional: bool) -> (Tensor<f32>, Option<Vec<u32>>) {
        let z = sample_normal::<f32>(batch, noise_dim, &mut self.rng);
        let labels = conditional.then(|| {
            (0..batch)
                .map(|_| self.rng.random_range(0..self.n_classes as u32))
                .collect()
        });
        (z, labels)
    }
}

fn check_finite(name: &str, v: f32, lr: f64, gen: &Generator<f32>, disc: &Discriminator<f32>) -> Result<(), Error> {
    if v.is_finite() {
        return Ok(());
    }
    let gn = |bank: &crate::tensor::ParamBank<f32>| -> f64 {
        bank.iter()
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt()
    };
    Err(Error::Numeric(format!(
        "{name} became non-finite ({v}); lr={lr:.3e}, |grad_G|={:.3e}, |grad_D|={:.3e}",
        gn(&gen.bank),
        gn(&disc.bank)
    )))
}

/// Generate fakes without tracking gradients back into the generator.
fn generate_detached(
    gen: &Generator<f32>,
    z: &Tensor<f32>,
    labels: Option<&[u32]>,
) -> Result<Tensor<f32>, Error> {
    let mut tape = Tape::new();
    let zv = tape.input(z, false);
    let imgs = gen.forward(&mut tape, zv, labels)?;
    let shape = tape.shape(imgs).to_vec();
    Ok(Tensor::new(tape.value(imgs).to_vec(), &shape))
}

/// Mean discriminator score over given images, inference mode.
fn mean_score(disc: &Discriminator<f32>, images: &Tensor<f32>, labels: Option<&[u32]>) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let iv = tape.input(images, false);
    let s = disc.forward(&mut tape, iv, labels, None)?;
    let vals = tape.value(s);
    Ok(vals.iter().map(|v| *v as f64).sum::<f64>() / vals.len() as f64)
}

/// Run the adversarial loop. Per step, vanilla mode does one discriminator
/// update then one generator update on fresh noise; wgan mode does
/// `n_critic` critic updates (each clipped) then one generator update.
/// Deterministic given the config seed; `wall_ms` is the only
/// non-reproducible output field. Writes the run log, periodic sample
/// grids and checkpoints under `out_dir` when given.
pub fn train_run(
    data: &Dataset,
    gen: &mut Generator<f32>,
    disc: &mut Discriminator<f32>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut observer: Option<&mut dyn FnMut(StepEvent)>,
) -> Result<RunLog, Error> {
    crate::tensor::tune_allocator();
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(Error::Input(format!(
            "dataset of {} images cannot fill one batch of {}",
            data.len(),
            cfg.batch
        )));
    }
    if cfg.conditional != gen.cfg.conditional || cfg.conditional != disc.cfg.conditional {
        return Err(Error::Config("conditional flag disagrees between config and models".into()));
    }
    if (cfg.mode == GanMode::Wgan) != gen_is_wgan(disc) {
        return Err(Error::Config(
            "wgan training needs a sigmoid-free discriminator (and vice versa)".into(),
        ));
    }

    let horizon = cfg.lr_horizon.unwrap_or(cfg.epochs);
    let n_classes = gen.cfg.n_classes;
    let mut noise_d = NoiseSource::batch::<1>(cfg.seed, n_classes);
    let mut noise_g = NoiseSource::batch::<2>(cfg.seed, n_classes);
    let mut probe_src = NoiseSource::batch::<3>(cfg.seed, n_classes);
    let mut ckpt_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ckpt_rng.set_stream(4);

    let mut opt_g;
    let mut opt_d;
    match cfg.mode {
        GanMode::Vanilla => {
            opt_g = Optimizer::adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.opt_eps);
            opt_d = Optimizer::adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.opt_eps);
        }
        GanMode::Wgan => {
            opt_g = Optimizer::rmsprop(cfg.lr, cfg.rms_decay, cfg.opt_eps);
            opt_d = Optimizer::rmsprop(cfg.lr, cfg.rms_decay, cfg.opt_eps);
        }
    }

    // fixed probe for the per-epoch gap estimate and sample grids
    let probe_n = cfg.batch.min(64);
    let (probe_z, probe_labels) = probe_src.draw(probe_n, gen.cfg.noise_dim(), cfg.conditional);
    let (probe_real_raw, probe_real_labels) = {
        let idx: Vec<u32> = (0..probe_n as u32).collect();
        gather_batch(data, &idx)
    };
    let probe_real = Tensor::new(probe_real_raw, &[probe_n, data.image_width()]);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("samples"))?;
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut log_file = match out_dir {
        Some(dir) => Some(std::fs::File::create(dir.join("run.log"))?),
        None => None,
    };

    let mut run = RunLog::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = cosine_lr(cfg.lr, epoch, horizon, cfg.lr_min);
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);

        let mut d_sum = 0.0f64;
        let mut d_count = 0u64;
        let mut g_sum = 0.0f64;
        let mut g_count = 0u64;

        let batches = batch_indices(data.len(), cfg.batch, cfg.seed, epoch);
        let critic_rounds = match cfg.mode {
            GanMode::Vanilla => 1,
            GanMode::Wgan => cfg.n_critic,
        };
        let mut batch_iter = batches.iter();
        'steps: loop {
            // discriminator / critic updates
            let mut critic_done = 0;
            while critic_done < critic_rounds {
                let Some(idx) = batch_iter.next() else { break 'steps };
                let (real_raw, real_labels) = gather_batch(data, idx);
                let real = Tensor::new(real_raw, &[cfg.batch, data.image_width()]);
                let (z, fake_labels) = noise_d.draw(cfg.batch, gen.cfg.noise_dim(), cfg.conditional);
                let fakes = generate_detached(gen, &z, fake_labels.as_deref())?;

                let mut tape = Tape::new();
                let rv = tape.input(&real, false);
                let fv = tape.input(&fakes, false);
                let d_real = disc.forward(&mut tape, rv, cfg.conditional.then_some(&real_labels[..]), None)?;
                let d_fake = disc.forward(&mut tape, fv, fake_labels.as_deref(), None)?;
                let loss = match cfg.mode {
                    GanMode::Vanilla => vanilla_d_loss(&mut tape, d_real, d_fake),
                    GanMode::Wgan => wgan_d_loss(&mut tape, d_real, d_fake),
                };
                let loss_val = tape.value(loss)[0];
                tape.backward(loss)?;
                tape.export_grads(&mut disc.bank);
                check_finite("loss_D", loss_val, lr, gen, disc)?;
                if cfg.mode == GanMode::Wgan && cfg.clip_mode == ClipMode::GradNorm {
                    grad_norm_clip(&mut disc.bank, cfg.clip);
                }
                opt_d.step(&mut disc.bank)?;
                disc.bank.zero_grads();
                if cfg.mode == GanMode::Wgan && cfg.clip_mode == ClipMode::Weights {
                    weight_clip(&mut disc.bank, cfg.clip);
                }
                run.d_updates += 1;
                d_sum += loss_val as f64;
                d_count += 1;
                critic_done += 1;
                if let Some(obs) = observer.as_deref_mut() {
                    obs(StepEvent::DiscUpdate { disc_max_abs: disc.bank.max_abs() });
                }
            }

            // generator update on fresh noise
            let (z, fake_labels) = noise_g.draw(cfg.batch, gen.cfg.noise_dim(), cfg.conditional);
            let mut tape = Tape::new();
            let zv = tape.input(&z, false);
            let imgs = gen.forward(&mut tape, zv, fake_labels.as_deref())?;
            let d_fake = disc.forward(&mut tape, imgs, fake_labels.as_deref(), None)?;
            let loss = match cfg.mode {
                GanMode::Vanilla => vanilla_g_loss(&mut tape, d_fake, cfg.saturating_g_loss),
                GanMode::Wgan => wgan_g_loss(&mut tape, d_fake),
            };
            let loss_val = tape.value(loss)[0];
            tape.backward(loss)?;
            tape.export_grads(&mut gen.bank);
            check_finite("loss_G", loss_val, lr, gen, disc)?;
            opt_g.step(&mut gen.bank)?;
            gen.bank.zero_grads();
            run.g_updates += 1;
            g_sum += loss_val as f64;
            g_count += 1;
            if let Some(obs) = observer.as_deref_mut() {
                obs(StepEvent::GenUpdate);
            }
        }

        // end-of-epoch probe: Wasserstein-style gap on fixed data
        let probe_fakes = generate_detached(gen, &probe_z, probe_labels.as_deref())?;
        let mr = mean_score(disc, &probe_real, cfg.conditional.then_some(&probe_real_labels[..]))?;
        let mf = mean_score(disc, &probe_fakes, probe_labels.as_deref())?;
        let w_gap = (mr - mf).abs() as f32;

        let rec = EpochRecord {
            epoch,
            lr,
            loss_d: (d_sum / d_count.max(1) as f64) as f32,
            loss_g: (g_sum / g_count.max(1) as f64) as f32,
            wall_ms: t0.elapsed().as_millis() as u64,
            w_gap,
        };
        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            writeln!(f, "{}", rec.log_line())?;
        }
        if let Some(dir) = out_dir {
            if cfg.sample_every > 0 && (epoch + 1) % cfg.sample_every == 0 {
                let grid = imgio::sample_grid(&probe_fakes.data, 8, probe_n.min(64) / 8);
                imgio::write_pgm(&dir.join(format!("samples/epoch_{epoch:04}.pgm")), &grid)?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_pair(dir, &format!("epoch_{epoch:04}"), gen, disc, &ckpt_rng, None, None)?;
            }
        }
        run.records.push(rec);
    }

    if let Some(dir) = out_dir {
        save_pair(dir, "final", gen, disc, &ckpt_rng, Some(&opt_g), Some(&opt_d))?;
    }
    Ok(run)
}

fn gen_is_wgan(disc: &Discriminator<f32>) -> bool {
    !disc.has_sigmoid()
}

fn save_pair(
    dir: &Path,
    tag: &str,
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    rng: &ChaCha8Rng,
    opt_g: Option<&Optimizer<f32>>,
    opt_d: Option<&Optimizer<f32>>,
) -> Result<(), Error> {
    let rng_state = RngState::capture(rng);
    let g_ck = Checkpoint::from_bank(&gen.bank, &rng_state, opt_g.map(|o| o.snapshot(&gen.bank)));
    crate::checkpoint::save(&dir.join(format!("checkpoints/gen_{tag}.ckpt")), &g_ck)?;
    let d_ck = Checkpoint::from_bank(&disc.bank, &rng_state, opt_d.map(|o| o.snapshot(&disc.bank)));
    crate::checkpoint::save(&dir.join(format!("checkpoints/disc_{tag}.ckpt")), &d_ck)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_scores(vals: &[f32]) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let t = Tensor::new(vals.iter().map(|v| *v as f64).collect(), &[vals.len(), 1]);
        let v = tape.input(&t, false);
        (tape, v)
    }

    #[test]
    fn optimal_discriminator_loss_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let dr = Tensor::new(vec![0.999_999_9], &[1, 1]);
        let df = Tensor::new(vec![1e-9], &[1, 1]);
        let r = tape.input(&dr, false);
        let f = tape.input(&df, false);
        let loss = vanilla_d_loss(&mut tape, r, f);
        assert!(tape.value(loss)[0].abs() < 1e-6);
    }

    #[test]
    fn uninformative_fixed_point_loss_is_2_log_2() {
        let (mut tape, v) = scalar_scores(&[0.5, 0.5]);
        let loss = vanilla_d_loss(&mut tape, v, v);
        assert!((tape.value(loss)[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nonsaturating_g_loss_at_half_is_log_2() {
        let (mut tape, v) = scalar_scores(&[0.5]);
        let loss = vanilla_g_loss(&mut tape, v, false);
        assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturating_form_selectable() {
        let (mut tape, v) = scalar_scores(&[0.25]);
        let loss = vanilla_g_loss(&mut tape, v, true);
        assert!((tape.value(loss)[0] - 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vanilla_loss_nonnegative_on_random_scores() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let dr: Vec<f32> = (0..8).map(|_| rng.random_range(1e-6..1.0)).collect();
            let df: Vec<f32> = (0..8).map(|_| rng.random_range(0.0..1.0 - 1e-6)).collect();
            let (mut tape, r) = scalar_scores(&dr);
            let ft = Tensor::new(df.iter().map(|v| *v as f64).collect(), &[df.len(), 1]);
            let f = tape.input(&ft, false);
            let loss = vanilla_d_loss(&mut tape, r, f);
            assert!(tape.value(loss)[0] >= 0.0);
        }
    }

    #[test]
    fn score_outside_unit_interval_is_numeric_error() {
        let (mut tape, v) = scalar_scores(&[1.5]);
        assert!(matches!(
            gan_losses(&mut tape, v, v, false),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn wgan_losses_match_arithmetic() {
        let (mut tape, r) = scalar_scores(&[1.0]);
        let ft = Tensor::new(vec![-1.0f64], &[1, 1]);
        let f = tape.input(&ft, false);
        let (ld, lg) = wgan_losses(&mut tape, r, f);
        assert_eq!(tape.value(ld)[0], -2.0);
        assert_eq!(tape.value(lg)[0], 1.0);

        // equal real/fake distributions -> zero
        let (mut tape2, v) = scalar_scores(&[0.3, -0.7, 2.0]);
        let (ld2, _) = wgan_losses(&mut tape2, v, v);
        assert_eq!(tape2.value(ld2)[0], 0.0);

        // loss_G at D(G(z)) = 0 is 0
        let (mut tape3, z) = scalar_scores(&[0.0]);
        let lg3 = wgan_g_loss(&mut tape3, z);
        assert_eq!(tape3.value(lg3)[0], 0.0);
    }

    #[test]
    fn log_line_format() {
        let rec = EpochRecord { epoch: 3, lr: 2e-4, loss_d: 1.5, loss_g: 0.25, wall_ms: 837, w_gap: 0.1 };
        let line = rec.log_line();
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], "3");
        assert_eq!(cols[4], "837");
    }
}
