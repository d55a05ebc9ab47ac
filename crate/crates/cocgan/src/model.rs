//! Generator and discriminator assemblies.
//!
//! The generator grows a single seed point into a 28x28 point grid through
//! three increaser+block stages; the discriminator runs the mirror-image
//! reducer ladder down to one point and scores it with an FC head.
//! Conditional variants replace half of the seed with a learned label
//! embedding (generator) and broadcast-add an FC-resized embedding onto the
//! input points (discriminator).

use crate::cluster::{ClusterAssignment, ClusterBlock, PointIncreaser, PointReducer};
use crate::error::Error;
use crate::tensor::{param_init, Elem, InitScheme, ParamBank, ParamId, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Output image side; the ladder is fixed to 28x28 carriers.
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// One increase/reduce stage of the ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Point increase/reduce ratio of the stage's resampling layer.
    pub sample_r: usize,
    /// Feature width entering the stage's resampling layer.
    pub dim_in: usize,
    /// Feature width of the stage's cluster blocks.
    pub dim_out: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub centers: usize,
}

impl StageConfig {
    fn validate(&self, label: &str) -> Result<(), Error> {
        let all_positive = self.sample_r >= 1
            && self.dim_in >= 1
            && self.dim_out >= 1
            && self.n_blocks >= 1
            && self.heads >= 1
            && self.head_dim >= 1
            && self.mlp_ratio >= 1
            && self.centers >= 1;
        if !all_positive {
            return Err(Error::Config(format!("{label}: all stage fields must be positive")));
        }
        let side = (self.centers as f64).sqrt().round() as usize;
        if side * side != self.centers {
            return Err(Error::Config(format!(
                "{label}: centers={} is not a perfect square",
                self.centers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

/// Full model description. Defaults reproduce the reference ladder:
/// generator points 1 -> 4 -> 16 -> 784, discriminator 784 -> 196 -> 49 -> 1.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub role: Role,
    pub stages: Vec<StageConfig>,
    pub channels: usize,
    pub seed_dim: usize,
    pub conditional: bool,
    pub n_classes: usize,
    pub embed_dim: usize,
    /// Discriminator only: skip the sigmoid on the score (critic mode).
    pub wgan: bool,
}

pub const DEFAULT_SEED_DIM: usize = 128;
pub const DEFAULT_EMBED_DIM: usize = DEFAULT_SEED_DIM / 2;
const DISC_HEAD_WIDTH: usize = 128;

/// Generator stage ladder: r=2 dims 128->64 (x2 blocks, mlp 4), r=2 64->32
/// (x2 blocks, mlp 8), r=7 32->channels (x1 block, mlp 4); heads=4,
/// head_dim=16 and one cluster center throughout.
pub fn default_generator_stages(channels: usize) -> Vec<StageConfig> {
    vec![
        StageConfig { sample_r: 2, dim_in: 128, dim_out: 64, n_blocks: 2, heads: 4, head_dim: 16, mlp_ratio: 4, centers: 1 },
        StageConfig { sample_r: 2, dim_in: 64, dim_out: 32, n_blocks: 2, heads: 4, head_dim: 16, mlp_ratio: 8, centers: 1 },
        StageConfig { sample_r: 7, dim_in: 32, dim_out: channels, n_blocks: 1, heads: 4, head_dim: 16, mlp_ratio: 4, centers: 1 },
    ]
}

/// Discriminator ladder mirroring the generator: r=2 channels->32, r=2
/// 32->64, r=7 64->128, then an FC head from the final single point.
pub fn default_discriminator_stages(channels: usize) -> Vec<StageConfig> {
    vec![
        StageConfig { sample_r: 2, dim_in: channels, dim_out: 32, n_blocks: 2, heads: 4, head_dim: 16, mlp_ratio: 4, centers: 1 },
        StageConfig { sample_r: 2, dim_in: 32, dim_out: 64, n_blocks: 2, heads: 4, head_dim: 16, mlp_ratio: 8, centers: 1 },
        StageConfig { sample_r: 7, dim_in: 64, dim_out: 128, n_blocks: 1, heads: 4, head_dim: 16, mlp_ratio: 4, centers: 1 },
    ]
}

impl ModelConfig {
    pub fn generator(channels: usize) -> Self {
        ModelConfig {
            role: Role::Generator,
            stages: default_generator_stages(channels),
            channels,
            seed_dim: DEFAULT_SEED_DIM,
            conditional: false,
            n_classes: 10,
            embed_dim: DEFAULT_EMBED_DIM,
            wgan: false,
        }
    }

    pub fn discriminator(channels: usize, wgan: bool) -> Self {
        ModelConfig {
            role: Role::Discriminator,
            stages: default_discriminator_stages(channels),
            channels,
            seed_dim: DEFAULT_SEED_DIM,
            conditional: false,
            n_classes: 10,
            embed_dim: DEFAULT_EMBED_DIM,
            wgan,
        }
    }

    pub fn conditional(mut self, n_classes: usize) -> Self {
        self.conditional = true;
        self.n_classes = n_classes;
        self
    }

    /// Noise width fed to a generator (embedding fills the rest).
    pub fn noise_dim(&self) -> usize {
        if self.conditional {
            self.seed_dim - self.embed_dim
        } else {
            self.seed_dim
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(&format!("stage {i}"))?;
        }
        for w in self.stages.windows(2) {
            if w[0].dim_out != w[1].dim_in {
                return Err(Error::Config(format!(
                    "stage widths do not chain: {} -> {}",
                    w[0].dim_out, w[1].dim_in
                )));
            }
        }
        let ratio_product: usize = self.stages.iter().map(|s| s.sample_r).product();
        if ratio_product != IMAGE_SIDE {
            return Err(Error::Config(format!(
                "stage ratios multiply to {ratio_product}, need {IMAGE_SIDE}"
            )));
        }
        if self.conditional {
            if self.n_classes == 0 {
                return Err(Error::Config("conditional model needs n_classes >= 1".into()));
            }
            if self.embed_dim == 0 || self.embed_dim >= self.seed_dim {
                return Err(Error::Config(format!(
                    "embed_dim {} must lie strictly inside seed_dim {}",
                    self.embed_dim, self.seed_dim
                )));
            }
        }
        match self.role {
            Role::Generator => {
                if self.stages[0].dim_in != self.seed_dim {
                    return Err(Error::Config(format!(
                        "generator stage 0 width {} must equal seed_dim {}",
                        self.stages[0].dim_in, self.seed_dim
                    )));
                }
                if self.stages.last().unwrap().dim_out != self.channels {
                    return Err(Error::Config(format!(
                        "generator output width {} must equal channel count {}",
                        self.stages.last().unwrap().dim_out,
                        self.channels
                    )));
                }
            }
            Role::Discriminator => {
                if self.stages[0].dim_in != self.channels {
                    return Err(Error::Config(format!(
                        "discriminator input width {} must equal channel count {}",
                        self.stages[0].dim_in, self.channels
                    )));
                }
                if self.stages.last().unwrap().dim_out != DISC_HEAD_WIDTH {
                    return Err(Error::Config(format!(
                        "discriminator final width {} must equal head width {DISC_HEAD_WIDTH}",
                        self.stages.last().unwrap().dim_out
                    )));
                }
            }
        }
        // Grid divisibility along the ladder.
        let mut side = match self.role {
            Role::Generator => 1,
            Role::Discriminator => IMAGE_SIDE,
        };
        for (i, s) in self.stages.iter().enumerate() {
            match self.role {
                Role::Generator => side *= s.sample_r,
                Role::Discriminator => {
                    if side % s.sample_r != 0 {
                        return Err(Error::Config(format!(
                            "stage {i}: grid side {side} not divisible by ratio {}",
                            s.sample_r
                        )));
                    }
                    side /= s.sample_r;
                }
            }
            let cside = (s.centers as f64).sqrt().round() as usize;
            if side % cside != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {} centers need a {cside}x{cside} split of a {side}x{side} grid",
                    s.centers
                )));
            }
        }
        Ok(())
    }

    /// Point counts after each resampling layer, starting from the input.
    pub fn point_ladder(&self) -> Vec<usize> {
        let mut side = match self.role {
            Role::Generator => 1,
            Role::Discriminator => IMAGE_SIDE,
        };
        let mut ladder = vec![side * side];
        for s in &self.stages {
            match self.role {
                Role::Generator => side *= s.sample_r,
                Role::Discriminator => side /= s.sample_r,
            }
            ladder.push(side * side);
        }
        ladder
    }
}

struct Stage {
    blocks: Vec<ClusterBlock>,
}

/// Compose a conditional seed: `concat(noise, embed(label))`. The embedding
/// table rows are gathered per batch element.
pub fn compose_conditional_seed<E: Elem>(
    tape: &mut Tape<E>,
    bank: &ParamBank<E>,
    embed: ParamId,
    noise: Var,
    labels: &[u32],
    n_classes: usize,
) -> Result<Var, Error> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::Input(format!("label {bad} out of range (n_classes={n_classes})")));
    }
    if tape.shape(noise)[0] != labels.len() {
        return Err(Error::Input(format!(
            "{} noise rows but {} labels",
            tape.shape(noise)[0],
            labels.len()
        )));
    }
    let table = tape.param(bank, embed);
    let rows = tape.gather_rows(table, labels);
    Ok(tape.concat_cols(&[noise, rows]))
}

/// Point-growing generator.
pub struct Generator<E: Elem> {
    pub cfg: ModelConfig,
    pub bank: ParamBank<E>,
    embed: Option<ParamId>,
    increasers: Vec<PointIncreaser>,
    stages: Vec<Stage>,
}

impl<E: Elem> Generator<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, Error> {
        if cfg.role != Role::Generator {
            return Err(Error::Config("generator built from a non-generator config".into()));
        }
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let embed = if cfg.conditional {
            Some(bank.add(
                "g.embed",
                param_init(&[cfg.n_classes, cfg.embed_dim], InitScheme::UniformFanIn, &mut rng)?,
            ))
        } else {
            None
        };
        let mut increasers = Vec::new();
        let mut stages = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            increasers.push(PointIncreaser::new(
                &mut bank,
                &format!("g.s{i}.inc"),
                s.sample_r,
                s.dim_in,
                s.dim_out,
                &mut rng,
            )?);
            let mut blocks = Vec::new();
            for j in 0..s.n_blocks {
                blocks.push(ClusterBlock::new(
                    &mut bank,
                    &format!("g.s{i}.b{j}"),
                    s.dim_out,
                    s.heads,
                    s.head_dim,
                    s.mlp_ratio,
                    s.centers,
                    &mut rng,
                )?);
            }
            stages.push(Stage { blocks });
        }
        Ok(Generator { cfg, bank, embed, increasers, stages })
    }

    /// Map noise (and labels, when conditional) to images in `[-1, 1]`,
    /// shaped `[batch, 28*28*channels]`.
    pub fn forward(&self, tape: &mut Tape<E>, noise: Var, labels: Option<&[u32]>) -> Result<Var, Error> {
        let batch = tape.shape(noise)[0];
        if tape.shape(noise)[1] != self.cfg.noise_dim() {
            return Err(Error::Config(format!(
                "noise width {} != expected {}",
                tape.shape(noise)[1],
                self.cfg.noise_dim()
            )));
        }
        let z = match (self.cfg.conditional, labels) {
            (true, Some(l)) => {
                compose_conditional_seed(tape, &self.bank, self.embed.unwrap(), noise, l, self.cfg.n_classes)?
            }
            (true, None) => {
                return Err(Error::Contract("conditional generator needs labels".into()));
            }
            (false, Some(_)) => {
                return Err(Error::Contract("labels given to unconditional generator".into()));
            }
            (false, None) => noise,
        };

        let (mut h, mut w) = (1usize, 1usize);
        let mut x = z; // [batch*1, seed_dim]
        for (inc, stage) in self.increasers.iter().zip(&self.stages) {
            let (nx, nh, nw) = inc.forward(tape, &self.bank, x, batch, h, w)?;
            x = nx;
            h = nh;
            w = nw;
            for block in &stage.blocks {
                x = block.forward(tape, &self.bank, x, batch, h, w, None)?;
            }
        }
        let out = tape.tanh(x);
        Ok(tape.reshape(out, &[batch, IMAGE_PIXELS * self.cfg.channels]))
    }

    /// Sample noise rows from the standard normal.
    pub fn sample_noise(&self, batch: usize, rng: &mut ChaCha8Rng) -> crate::tensor::Tensor<E> {
        sample_normal(batch, self.cfg.noise_dim(), rng)
    }
}

pub fn sample_normal<E: Elem>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> crate::tensor::Tensor<E> {
    use rand_distr::{Distribution, StandardNormal};
    let data: Vec<E> = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            E::from_f64(v)
        })
        .collect();
    crate::tensor::Tensor::new(data, &[rows, cols])
}

/// Point-reducing discriminator / critic.
pub struct Discriminator<E: Elem> {
    pub cfg: ModelConfig,
    pub bank: ParamBank<E>,
    embed: Option<ParamId>,
    cond_w: Option<ParamId>,
    cond_b: Option<ParamId>,
    reducers: Vec<PointReducer>,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<E: Elem> Discriminator<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, Error> {
        if cfg.role != Role::Discriminator {
            return Err(Error::Config("discriminator built from a non-discriminator config".into()));
        }
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let (embed, cond_w, cond_b) = if cfg.conditional {
            let e = bank.add(
                "d.embed",
                param_init(&[cfg.n_classes, cfg.embed_dim], InitScheme::UniformFanIn, &mut rng)?,
            );
            let w = bank.add(
                "d.cond.w",
                param_init(&[cfg.embed_dim, cfg.channels], InitScheme::UniformFanIn, &mut rng)?,
            );
            let b = bank.add("d.cond.b", param_init(&[cfg.channels], InitScheme::Zeros, &mut rng)?);
            (Some(e), Some(w), Some(b))
        } else {
            (None, None, None)
        };
        let mut reducers = Vec::new();
        let mut stages = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            reducers.push(PointReducer::new(
                &mut bank,
                &format!("d.s{i}.red"),
                s.sample_r,
                s.dim_in,
                s.dim_out,
                &mut rng,
            )?);
            let mut blocks = Vec::new();
            for j in 0..s.n_blocks {
                blocks.push(ClusterBlock::new(
                    &mut bank,
                    &format!("d.s{i}.b{j}"),
                    s.dim_out,
                    s.heads,
                    s.head_dim,
                    s.mlp_ratio,
                    s.centers,
                    &mut rng,
                )?);
            }
            stages.push(Stage { blocks });
        }
        let head_w = bank.add(
            "d.head.w",
            param_init(&[DISC_HEAD_WIDTH, 1], InitScheme::UniformFanIn, &mut rng)?,
        );
        let head_b = bank.add("d.head.b", param_init(&[1], InitScheme::Zeros, &mut rng)?);
        Ok(Discriminator { cfg, bank, embed, cond_w, cond_b, reducers, stages, head_w, head_b })
    }

    /// Override the center count used by every block of the first stage
    /// (clustering is weight-free, so any valid count works at inference).
    pub fn set_first_stage_centers(&mut self, centers: usize) -> Result<(), Error> {
        let side = (centers as f64).sqrt().round() as usize;
        if side * side != centers {
            return Err(Error::Config(format!("centers={centers} is not a perfect square")));
        }
        let grid_side = IMAGE_SIDE / self.cfg.stages[0].sample_r;
        if grid_side % side != 0 {
            return Err(Error::Config(format!(
                "{centers} centers need a {side}x{side} split of a {grid_side}x{grid_side} grid"
            )));
        }
        self.cfg.stages[0].centers = centers;
        for b in &mut self.stages[0].blocks {
            b.layer.centers = centers;
        }
        Ok(())
    }

    /// Score a batch of images shaped `[batch, 28*28*channels]` with values
    /// in `[-1, 1]`. Returns `[batch, 1]`: sigmoid probabilities in vanilla
    /// mode, unbounded critic scores in wgan mode. `capture` receives the
    /// first block's per-image cluster assignment (head 0) at stage 0.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        images: Var,
        labels: Option<&[u32]>,
        mut capture: Option<&mut Vec<ClusterAssignment>>,
    ) -> Result<Var, Error> {
        let batch = tape.shape(images)[0];
        let ch = self.cfg.channels;
        if tape.shape(images)[1] != IMAGE_PIXELS * ch {
            return Err(Error::Config(format!(
                "image width {} != {}",
                tape.shape(images)[1],
                IMAGE_PIXELS * ch
            )));
        }
        let mut x = tape.reshape(images, &[batch * IMAGE_PIXELS, ch]);

        match (self.cfg.conditional, labels) {
            (true, Some(l)) => {
                if let Some(&bad) = l.iter().find(|&&v| v as usize >= self.cfg.n_classes) {
                    return Err(Error::Input(format!(
                        "label {bad} out of range (n_classes={})",
                        self.cfg.n_classes
                    )));
                }
                if l.len() != batch {
                    return Err(Error::Input(format!("{} labels for {batch} images", l.len())));
                }
                let table = tape.param(&self.bank, self.embed.unwrap());
                let emb = tape.gather_rows(table, l);
                let w = tape.param(&self.bank, self.cond_w.unwrap());
                let b = tape.param(&self.bank, self.cond_b.unwrap());
                let cond = tape.linear(emb, w, b); // [batch, ch]
                let mut rep = Vec::with_capacity(batch * IMAGE_PIXELS);
                for bi in 0..batch as u32 {
                    rep.extend(std::iter::repeat_n(bi, IMAGE_PIXELS));
                }
                let cond_points = tape.gather_rows(cond, &rep);
                x = tape.add(x, cond_points);
            }
            (true, None) => return Err(Error::Contract("conditional discriminator needs labels".into())),
            (false, Some(_)) => {
                return Err(Error::Contract("labels given to unconditional discriminator".into()));
            }
            (false, None) => {}
        }

        let (mut h, mut w) = (IMAGE_SIDE, IMAGE_SIDE);
        for (si, (red, stage)) in self.reducers.iter().zip(&self.stages).enumerate() {
            let (nx, nh, nw) = red.forward(tape, &self.bank, x, batch, h, w)?;
            x = nx;
            h = nh;
            w = nw;
            for (bi, block) in stage.blocks.iter().enumerate() {
                let cap = if si == 0 && bi == 0 { capture.as_deref_mut() } else { None };
                x = block.forward(tape, &self.bank, x, batch, h, w, cap)?;
            }
        }
        let flat = tape.reshape(x, &[batch, DISC_HEAD_WIDTH]);
        let hw = tape.param(&self.bank, self.head_w);
        let hb = tape.param(&self.bank, self.head_b);
        let score = tape.linear(flat, hw, hb);
        if self.cfg.wgan {
            Ok(score)
        } else {
            Ok(tape.sigmoid(score))
        }
    }

    pub fn has_sigmoid(&self) -> bool {
        !self.cfg.wgan
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn generator_ladder_is_1_4_16_784() {
        let cfg = ModelConfig::generator(1);
        assert_eq!(cfg.point_ladder(), vec![1, 4, 16, 784]);
    }

    #[test]
    fn discriminator_ladder_is_784_196_49_1() {
        let cfg = ModelConfig::discriminator(1, false);
        assert_eq!(cfg.point_ladder(), vec![784, 196, 49, 1]);
    }

    #[test]
    fn conditional_seed_width_splits_in_half() {
        let cfg = ModelConfig::generator(1).conditional(10);
        assert_eq!(cfg.noise_dim() + cfg.embed_dim, cfg.seed_dim);
        assert_eq!(cfg.noise_dim(), 64);
    }

    #[test]
    fn bad_ratio_product_rejected() {
        let mut cfg = ModelConfig::generator(1);
        cfg.stages[0].sample_r = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unconditional_generator_rejects_labels() {
        let g = Generator::<f32>::new(ModelConfig::generator(1), 1).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = g.sample_noise(2, &mut rng);
        let zv = tape.input(&z, false);
        assert!(g.forward(&mut tape, zv, Some(&[0, 1])).is_err());
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let g = Generator::<f32>::new(ModelConfig::generator(1).conditional(10), 1).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = g.sample_noise(2, &mut rng);
        let zv = tape.input(&z, false);
        let err = g.forward(&mut tape, zv, Some(&[0, 10])).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
    }
}
