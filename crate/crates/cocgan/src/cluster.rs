//! Context-cluster computation: center proposal by grid pooling, cosine
//! similarity assignment, gated aggregation into per-cluster features, and
//! dispatch back to member points. Plus the point increaser and reducer
//! that move between grid resolutions.
//!
//! All forward math is built from tape primitives, so gradients (including
//! the learnable similarity gain/shift scalars) come from the tape's
//! backward sweep. The hard argmax assignment itself is treated as
//! non-differentiable; gradients flow through the similarity values inside
//! the gates.

use crate::error::Error;
use crate::points::grid_positions;
use crate::tensor::{param_init, Elem, InitScheme, ParamBank, ParamId, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Hard assignment of `n` points to `c` centers.
#[derive(Clone, Debug)]
pub struct ClusterAssignment {
    pub n_centers: usize,
    /// `assignment[i]` = index of the center point `i` belongs to.
    pub assignment: Vec<u32>,
    /// Per-center member lists; disjoint and jointly covering `0..n`.
    pub members: Vec<Vec<u32>>,
}

impl ClusterAssignment {
    /// Partition invariant: members are disjoint and cover all points.
    pub fn is_partition(&self, n_points: usize) -> bool {
        let mut seen = vec![false; n_points];
        let mut count = 0;
        for m in &self.members {
            for &i in m {
                let i = i as usize;
                if i >= n_points || seen[i] {
                    return false;
                }
                seen[i] = true;
                count += 1;
            }
        }
        count == n_points && self.assignment.len() == n_points
    }
}

fn perfect_sqrt(c: usize) -> Option<usize> {
    let s = (c as f64).sqrt().round() as usize;
    (s * s == c).then_some(s)
}

/// Averaging matrix `[c, n]` that pools each of the `sqrt(c) x sqrt(c)`
/// grid cells of an `h x w` point grid into one proposed center.
pub fn center_pool_matrix<E: Elem>(height: usize, width: usize, centers: usize) -> Result<Vec<E>, Error> {
    let side = perfect_sqrt(centers).ok_or_else(|| {
        Error::Config(format!("center count {centers} is not a perfect square"))
    })?;
    if height % side != 0 || width % side != 0 {
        return Err(Error::Config(format!(
            "{centers} centers need a {side}x{side} split, but the grid is {height}x{width}"
        )));
    }
    let (ch, cw) = (height / side, width / side);
    let n = height * width;
    let inv = E::from_f64(1.0 / (ch * cw) as f64);
    let mut m = vec![E::ZERO; centers * n];
    for i in 0..height {
        for j in 0..width {
            let cell = (i / ch) * side + (j / cw);
            m[cell * n + i * width + j] = inv;
        }
    }
    Ok(m)
}

/// Propose centers: each is the mean of the points in its grid cell
/// (non-overlapping average pooling of the similarity-space points).
pub fn propose_centers<E: Elem>(
    tape: &mut Tape<E>,
    points: Var,
    height: usize,
    width: usize,
    centers: usize,
) -> Result<Var, Error> {
    let n = height * width;
    if tape.shape(points)[0] != n {
        return Err(Error::Config(format!(
            "point count {} does not match {height}x{width} grid",
            tape.shape(points)[0]
        )));
    }
    let pool = center_pool_matrix::<E>(height, width, centers)?;
    let pool = tape.constant_owned(pool, &[centers, n]);
    Ok(tape.matmul(pool, points))
}

/// Cosine-similarity matrix `[c, n]` plus hard argmax assignment with
/// lowest-index tie-break.
pub fn cluster_assign<E: Elem>(tape: &mut Tape<E>, centers: Var, points: Var) -> (Var, ClusterAssignment) {
    let sim = tape.cosine_similarity(centers, points);
    let c = tape.shape(sim)[0];
    let n = tape.shape(sim)[1];
    let s = tape.value(sim);
    let mut assignment = vec![0u32; n];
    let mut members = vec![Vec::new(); c];
    for p in 0..n {
        let mut best = 0usize;
        let mut best_v = s[p];
        for k in 1..c {
            let v = s[k * n + p];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        assignment[p] = best as u32;
        members[best].push(p as u32);
    }
    (sim, ClusterAssignment { n_centers: c, assignment, members })
}

/// 0/1 membership matrix `[c, n]` as a tape constant.
pub fn membership_matrix<E: Elem>(tape: &mut Tape<E>, assign: &ClusterAssignment) -> Var {
    let c = assign.n_centers;
    let n = assign.assignment.len();
    let mut m = vec![E::ZERO; c * n];
    for (p, &k) in assign.assignment.iter().enumerate() {
        m[k as usize * n + p] = E::ONE;
    }
    tape.constant_owned(m, &[c, n])
}

/// Per-point gate `sig(gain * s_i + shift)` where `s_i` is point `i`'s
/// similarity to its assigned center. Always lands in `(0, 1)`.
pub fn cluster_gate<E: Elem>(tape: &mut Tape<E>, sim: Var, membership: Var, gain: Var, shift: Var) -> Var {
    let picked = tape.mul(sim, membership);
    let s_own = tape.sum_axis0(picked);
    let scaled = tape.mul_scalar(s_own, gain);
    let shifted = tape.add_scalar(scaled, shift);
    tape.sigmoid(shifted)
}

/// Gated aggregation of member values into one feature per cluster:
/// `g_k = (v_center_k + sum_i gate_i * v_i) / (1 + sum_i gate_i)` with the
/// sums running over cluster `k`'s members. The denominator is at least 1,
/// so empty clusters degrade to their center value.
pub fn aggregate_clusters<E: Elem>(
    tape: &mut Tape<E>,
    values: Var,
    value_centers: Var,
    membership: Var,
    gate: Var,
) -> Var {
    let n = tape.shape(values)[0];
    let scaled = tape.scale_rows(values, gate);
    let sums = tape.matmul(membership, scaled);
    let numer = tape.add(value_centers, sums);
    let gate_col = tape.reshape(gate, &[n, 1]);
    let counts = tape.matmul(membership, gate_col);
    let denom = tape.add_const(counts, 1.0);
    let inv = tape.recip(denom);
    let c = tape.shape(numer)[0];
    let inv_flat = tape.reshape(inv, &[c]);
    tape.scale_rows(numer, inv_flat)
}

/// Route each cluster's aggregated feature back to its member points,
/// weighted by the member's own gate: `out_i = gate_i * g_{assign(i)}`.
pub fn dispatch_gathered<E: Elem>(
    tape: &mut Tape<E>,
    aggregated: Var,
    assign: &ClusterAssignment,
    gate: Var,
) -> Var {
    let per_point = tape.gather_rows(aggregated, &assign.assignment);
    tape.scale_rows(per_point, gate)
}

/// Full single-head dispatch with the residual update:
/// `p_i' = p_i + FC(gate_i * g_{assign(i)})`.
pub fn dispatch_to_points<E: Elem>(
    tape: &mut Tape<E>,
    points: Var,
    aggregated: Var,
    assign: &ClusterAssignment,
    gate: Var,
    w: Var,
    b: Var,
) -> Var {
    let routed = dispatch_gathered(tape, aggregated, assign, gate);
    let mapped = tape.linear(routed, w, b);
    tape.add(points, mapped)
}

/// Multi-head cluster layer. Similarity and value projections consume
/// `[features || positions]`; per-head outputs are concatenated and fused
/// by one FC back to the feature width. The caller adds the residual.
#[derive(Clone, Debug)]
pub struct ClusterLayer {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub centers: usize,
    w_sim: ParamId,
    b_sim: ParamId,
    w_val: ParamId,
    b_val: ParamId,
    w_fuse: ParamId,
    b_fuse: ParamId,
    /// Per-head gain on similarity inside the gate, init 1.
    sim_gain: ParamId,
    /// Per-head shift, init 0.
    sim_shift: ParamId,
}

impl ClusterLayer {
    pub fn new<E: Elem>(
        bank: &mut ParamBank<E>,
        prefix: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        centers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        if heads < 1 || head_dim < 1 || dim < 1 {
            return Err(Error::Config(format!(
                "cluster layer {prefix}: dim/heads/head_dim must be positive"
            )));
        }
        perfect_sqrt(centers)
            .ok_or_else(|| Error::Config(format!("{prefix}: {centers} centers is not a perfect square")))?;
        let wide = heads * head_dim;
        let proj_in = dim + 2;
        let w_sim = bank.add(format!("{prefix}.w_sim"), param_init(&[proj_in, wide], InitScheme::UniformFanIn, rng)?);
        let b_sim = bank.add(format!("{prefix}.b_sim"), param_init(&[wide], InitScheme::Zeros, rng)?);
        let w_val = bank.add(format!("{prefix}.w_val"), param_init(&[proj_in, wide], InitScheme::UniformFanIn, rng)?);
        let b_val = bank.add(format!("{prefix}.b_val"), param_init(&[wide], InitScheme::Zeros, rng)?);
        let w_fuse = bank.add(format!("{prefix}.w_fuse"), param_init(&[wide, dim], InitScheme::UniformFanIn, rng)?);
        let b_fuse = bank.add(format!("{prefix}.b_fuse"), param_init(&[dim], InitScheme::Zeros, rng)?);
        let sim_gain = bank.add(format!("{prefix}.sim_gain"), param_init(&[heads], InitScheme::Constant(1.0), rng)?);
        let sim_shift = bank.add(format!("{prefix}.sim_shift"), param_init(&[heads], InitScheme::Constant(0.0), rng)?);
        Ok(ClusterLayer {
            dim,
            heads,
            head_dim,
            centers,
            w_sim,
            b_sim,
            w_val,
            b_val,
            w_fuse,
            b_fuse,
            sim_gain,
            sim_shift,
        })
    }

    /// Forward over a batch of point sets stacked as `[batch*n, dim]`.
    /// Clustering runs per image and per head; if `capture` is given it
    /// receives head 0's assignment for every image in batch order.
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        bank: &ParamBank<E>,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
        capture: Option<&mut Vec<ClusterAssignment>>,
    ) -> Result<Var, Error> {
        let n = height * width;
        if tape.shape(x) != [batch * n, self.dim] {
            return Err(Error::Config(format!(
                "cluster layer expects [{}x{}, {}] input, got {:?}",
                batch,
                n,
                self.dim,
                tape.shape(x)
            )));
        }
        let c = self.centers;
        let pool = center_pool_matrix::<E>(height, width, c)?;

        let pos_one = grid_positions::<E>(height, width);
        let mut pos = Vec::with_capacity(batch * n * 2);
        for _ in 0..batch {
            pos.extend_from_slice(&pos_one);
        }
        let pos = tape.constant_owned(pos, &[batch * n, 2]);
        let xp = tape.concat_cols(&[x, pos]);

        let w_sim = tape.param(bank, self.w_sim);
        let b_sim = tape.param(bank, self.b_sim);
        let w_val = tape.param(bank, self.w_val);
        let b_val = tape.param(bank, self.b_val);
        let gain_all = tape.param(bank, self.sim_gain);
        let shift_all = tape.param(bank, self.sim_shift);
        let w_fuse = tape.param(bank, self.w_fuse);
        let b_fuse = tape.param(bank, self.b_fuse);

        let hd = self.head_dim;
        let mut fused: Option<Var> = None;
        let mut captured = capture;
        for k in 0..self.heads {
            // head-specific projections: slice the (small) weight blocks
            // instead of the (large) projected activations
            let w_sim_k = tape.slice_cols(w_sim, k * hd, hd);
            let b_sim_k = tape.slice_rows(b_sim, k * hd, hd);
            let w_val_k = tape.slice_cols(w_val, k * hd, hd);
            let b_val_k = tape.slice_rows(b_val, k * hd, hd);
            let s_k = tape.linear(xp, w_sim_k, b_sim_k);
            let v_k = tape.linear(xp, w_val_k, b_val_k);

            // grid pooling proposes centers in both spaces, batched
            let centers_s = tape.seg_matmul_const(pool.clone(), c, n, s_k);
            let centers_v = tape.seg_matmul_const(pool.clone(), c, n, v_k);
            // per-image cosine similarity
            let cs_n = tape.l2_normalize_rows(centers_s);
            let pts_n = tape.l2_normalize_rows(s_k);

            // s_own[i]: similarity of point i to its assigned center;
            // target[i]: global row of that center
            let (s_own, target) = if c == 1 {
                let sim = tape.seg_rows_dot(cs_n, pts_n, n);
                let mut target = Vec::with_capacity(batch * n);
                for b in 0..batch {
                    target.extend(std::iter::repeat_n(b as u32, n));
                }
                (sim, target)
            } else {
                let sim = tape.seg_matmul_nt(cs_n, pts_n, c, n);
                let sv = tape.value(sim);
                let mut target = Vec::with_capacity(batch * n);
                let mut own_idx = Vec::with_capacity(batch * n);
                for b in 0..batch {
                    let base = b * c * n;
                    for p in 0..n {
                        let mut best = 0usize;
                        let mut best_v = sv[base + p];
                        for kk in 1..c {
                            let v = sv[base + kk * n + p];
                            if v > best_v {
                                best_v = v;
                                best = kk;
                            }
                        }
                        target.push((b * c + best) as u32);
                        own_idx.push((base + best * n + p) as u32);
                    }
                }
                (tape.gather_elems(sim, &own_idx), target)
            };
            if k == 0 {
                if let Some(cap) = captured.as_deref_mut() {
                    for b in 0..batch {
                        let mut assignment = Vec::with_capacity(n);
                        let mut members = vec![Vec::new(); c];
                        for p in 0..n {
                            let t = target[b * n + p] as usize - b * c;
                            assignment.push(t as u32);
                            members[t].push(p as u32);
                        }
                        cap.push(ClusterAssignment { n_centers: c, assignment, members });
                    }
                }
            }

            // gate_i = sig(gain * s_own + shift)
            let gain = tape.gather_rows(gain_all, &[k as u32]);
            let shift = tape.gather_rows(shift_all, &[k as u32]);
            let scaled = tape.mul_scalar(s_own, gain);
            let shifted = tape.add_scalar(scaled, shift);
            let gate = tape.sigmoid(shifted);

            // aggregate: g = (v_center + sum gate*v) / (1 + sum gate)
            let weighted = tape.scale_rows(v_k, gate);
            let sums = tape.scatter_add_rows(weighted, &target, batch * c);
            let numer = tape.add(centers_v, sums);
            let gate_col = tape.reshape(gate, &[batch * n, 1]);
            let counts = tape.scatter_add_rows(gate_col, &target, batch * c);
            let denom = tape.add_const(counts, 1.0);
            let inv = tape.recip(denom);
            let inv_flat = tape.reshape(inv, &[batch * c]);
            let agg = tape.scale_rows(numer, inv_flat);

            // dispatch back to members, gated
            let routed = tape.gather_rows(agg, &target);
            let head_out = tape.scale_rows(routed, gate);

            // fuse incrementally: out = bias + sum_k head_out_k * W_fuse[k-block]
            let w_fuse_k = tape.slice_rows(w_fuse, k * hd, hd);
            fused = Some(match fused {
                None => tape.linear(head_out, w_fuse_k, b_fuse),
                Some(acc) => {
                    let part = tape.matmul(head_out, w_fuse_k);
                    tape.add(acc, part)
                }
            });
        }
        Ok(fused.expect("at least one head"))
    }
}

/// Pre-norm residual block: cluster layer plus a two-layer GELU MLP, each
/// behind its own layer norm and residual connection. Positions are
/// untouched; only features change.
#[derive(Clone, Debug)]
pub struct ClusterBlock {
    pub layer: ClusterLayer,
    pub mlp_ratio: usize,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w_mlp1: ParamId,
    b_mlp1: ParamId,
    w_mlp2: ParamId,
    b_mlp2: ParamId,
}

impl ClusterBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        bank: &mut ParamBank<E>,
        prefix: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        mlp_ratio: usize,
        centers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        if mlp_ratio < 1 {
            return Err(Error::Config(format!("{prefix}: mlp_ratio must be >= 1")));
        }
        let layer = ClusterLayer::new(bank, &format!("{prefix}.cluster"), dim, heads, head_dim, centers, rng)?;
        let hidden = mlp_ratio * dim;
        let ln1_gamma = bank.add(format!("{prefix}.ln1.gamma"), param_init(&[dim], InitScheme::Constant(1.0), rng)?);
        let ln1_beta = bank.add(format!("{prefix}.ln1.beta"), param_init(&[dim], InitScheme::Zeros, rng)?);
        let ln2_gamma = bank.add(format!("{prefix}.ln2.gamma"), param_init(&[dim], InitScheme::Constant(1.0), rng)?);
        let ln2_beta = bank.add(format!("{prefix}.ln2.beta"), param_init(&[dim], InitScheme::Zeros, rng)?);
        let w_mlp1 = bank.add(format!("{prefix}.mlp.w1"), param_init(&[dim, hidden], InitScheme::UniformFanIn, rng)?);
        let b_mlp1 = bank.add(format!("{prefix}.mlp.b1"), param_init(&[hidden], InitScheme::Zeros, rng)?);
        let w_mlp2 = bank.add(format!("{prefix}.mlp.w2"), param_init(&[hidden, dim], InitScheme::UniformFanIn, rng)?);
        let b_mlp2 = bank.add(format!("{prefix}.mlp.b2"), param_init(&[dim], InitScheme::Zeros, rng)?);
        Ok(ClusterBlock {
            layer,
            mlp_ratio,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            w_mlp1,
            b_mlp1,
            w_mlp2,
            b_mlp2,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        bank: &ParamBank<E>,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
        capture: Option<&mut Vec<ClusterAssignment>>,
    ) -> Result<Var, Error> {
        let g1 = tape.param(bank, self.ln1_gamma);
        let be1 = tape.param(bank, self.ln1_beta);
        let normed = tape.layer_norm(x, g1, be1);
        let clustered = self.layer.forward(tape, bank, normed, batch, height, width, capture)?;
        let x1 = tape.add(x, clustered);

        let g2 = tape.param(bank, self.ln2_gamma);
        let be2 = tape.param(bank, self.ln2_beta);
        let normed2 = tape.layer_norm(x1, g2, be2);
        let w1 = tape.param(bank, self.w_mlp1);
        let b1 = tape.param(bank, self.b_mlp1);
        let h = tape.linear(normed2, w1, b1);
        let a = tape.gelu(h);
        let w2 = tape.param(bank, self.w_mlp2);
        let b2 = tape.param(bank, self.b_mlp2);
        let m = tape.linear(a, w2, b2);
        Ok(tape.add(x1, m))
    }
}

/// Linear upsampling: every point expands into an `r x r` block of child
/// points via one FC whose output is read as `(r, r, d_out)`. The grid
/// grows from `(h, w)` to `(r*h, r*w)`; positions are regenerated by the
/// caller from the new grid.
#[derive(Clone, Debug)]
pub struct PointIncreaser {
    pub ratio: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    w: ParamId,
    b: ParamId,
}

impl PointIncreaser {
    pub fn new<E: Elem>(
        bank: &mut ParamBank<E>,
        prefix: &str,
        ratio: usize,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        if ratio < 1 {
            return Err(Error::Config(format!("{prefix}: upsample ratio must be >= 1")));
        }
        let out_w = ratio * ratio * dim_out;
        let w = bank.add(format!("{prefix}.w"), param_init(&[dim_in, out_w], InitScheme::UniformFanIn, rng)?);
        let b = bank.add(format!("{prefix}.b"), param_init(&[out_w], InitScheme::Zeros, rng)?);
        Ok(PointIncreaser { ratio, dim_in, dim_out, w, b })
    }

    /// Returns the upsampled features and the new grid size.
    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        bank: &ParamBank<E>,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<(Var, usize, usize), Error> {
        let n = height * width;
        if tape.shape(x) != [batch * n, self.dim_in] {
            return Err(Error::Config(format!(
                "increaser expects [{}, {}], got {:?}",
                batch * n,
                self.dim_in,
                tape.shape(x)
            )));
        }
        let r = self.ratio;
        let w = tape.param(bank, self.w);
        let b = tape.param(bank, self.b);
        let y = tape.linear(x, w, b);
        let y = tape.reshape(y, &[batch * n * r * r, self.dim_out]);
        let (oh, ow) = (height * r, width * r);
        let mut idx = Vec::with_capacity(batch * oh * ow);
        for bi in 0..batch {
            for oi in 0..oh {
                for oj in 0..ow {
                    let parent = (oi / r) * width + (oj / r);
                    let child = (oi % r) * r + (oj % r);
                    idx.push(((bi * n + parent) * r * r + child) as u32);
                }
            }
        }
        Ok((tape.gather_rows(y, &idx), oh, ow))
    }
}

/// Linear downsampling: every non-overlapping `r x r` patch is concatenated
/// in raster order and mapped by one FC to a single output point.
#[derive(Clone, Debug)]
pub struct PointReducer {
    pub ratio: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    w: ParamId,
    b: ParamId,
}

impl PointReducer {
    pub fn new<E: Elem>(
        bank: &mut ParamBank<E>,
        prefix: &str,
        ratio: usize,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        if ratio < 1 {
            return Err(Error::Config(format!("{prefix}: downsample ratio must be >= 1")));
        }
        let in_w = ratio * ratio * dim_in;
        let w = bank.add(format!("{prefix}.w"), param_init(&[in_w, dim_out], InitScheme::UniformFanIn, rng)?);
        let b = bank.add(format!("{prefix}.b"), param_init(&[dim_out], InitScheme::Zeros, rng)?);
        Ok(PointReducer { ratio, dim_in, dim_out, w, b })
    }

    pub fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        bank: &ParamBank<E>,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<(Var, usize, usize), Error> {
        let r = self.ratio;
        if height % r != 0 || width % r != 0 {
            return Err(Error::Config(format!(
                "grid {height}x{width} not divisible by reduce ratio {r}"
            )));
        }
        let n = height * width;
        if tape.shape(x) != [batch * n, self.dim_in] {
            return Err(Error::Config(format!(
                "reducer expects [{}, {}], got {:?}",
                batch * n,
                self.dim_in,
                tape.shape(x)
            )));
        }
        let (oh, ow) = (height / r, width / r);
        let mut idx = Vec::with_capacity(batch * n);
        for bi in 0..batch {
            for oi in 0..oh {
                for oj in 0..ow {
                    for di in 0..r {
                        for dj in 0..r {
                            idx.push((bi * n + (oi * r + di) * width + (oj * r + dj)) as u32);
                        }
                    }
                }
            }
        }
        let gathered = tape.gather_rows(x, &idx);
        let patches = tape.reshape(gathered, &[batch * oh * ow, r * r * self.dim_in]);
        let w = tape.param(bank, self.w);
        let b = tape.param(bank, self.b);
        Ok((tape.linear(patches, w, b), oh, ow))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new((0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(), &[rows, cols])
    }

    // Scalar reference: cosine similarity of two vectors with the same
    // epsilon guard as the tape op.
    fn cos_ref(a: &[f64], b: &[f64]) -> f64 {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (na * nb)
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn single_center_is_global_mean() {
        let mut r = rng(1);
        let pts = random_matrix(&mut r, 12, 5); // 4x3 grid? centers=1 accepts any grid
        let mut tape = Tape::new();
        let p = tape.input(&pts, false);
        let c = propose_centers(&mut tape, p, 4, 3, 1).unwrap();
        let got = tape.value(c);
        for j in 0..5 {
            let mean: f64 = (0..12).map(|i| pts.data[i * 5 + j]).sum::<f64>() / 12.0;
            assert!((got[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn four_centers_pool_quadrants() {
        let mut r = rng(2);
        let pts = random_matrix(&mut r, 28 * 28, 3);
        let mut tape = Tape::new();
        let p = tape.input(&pts, false);
        let c = propose_centers(&mut tape, p, 28, 28, 4).unwrap();
        let got = tape.value(c);
        // center 3 = bottom-right 14x14 quadrant
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 14..28 {
                for k in 14..28 {
                    acc += pts.data[(i * 28 + k) * 3 + j];
                }
            }
            acc /= 196.0;
            assert!((got[3 * 3 + j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn n_centers_reproduce_points() {
        let mut r = rng(3);
        let pts = random_matrix(&mut r, 16, 4);
        let mut tape = Tape::new();
        let p = tape.input(&pts, false);
        let c = propose_centers(&mut tape, p, 4, 4, 16).unwrap();
        assert_eq!(tape.value(c), pts.data.as_slice());
    }

    #[test]
    fn non_square_center_count_rejected() {
        assert!(center_pool_matrix::<f64>(4, 4, 3).is_err());
        assert!(center_pool_matrix::<f64>(4, 4, 25).is_err()); // 5x5 split of 4x4
    }

    #[test]
    fn single_center_assigns_everything() {
        let mut r = rng(4);
        let pts = random_matrix(&mut r, 9, 4);
        let mut tape = Tape::new();
        let p = tape.input(&pts, false);
        let c = propose_centers(&mut tape, p, 3, 3, 1).unwrap();
        let (_, assign) = cluster_assign(&mut tape, c, p);
        assert!(assign.assignment.iter().all(|&a| a == 0));
        assert!(assign.is_partition(9));
        assert_eq!(assign.members[0].len(), 9);
    }

    #[test]
    fn orthogonal_centers_split_cleanly() {
        let mut tape = Tape::<f64>::new();
        let centers = tape.constant(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let points = tape.constant(&[1.0, 0.0], &[1, 2]); // e1
        let (sim, assign) = cluster_assign(&mut tape, centers, points);
        let s = tape.value(sim);
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s[1].abs() < 1e-6);
        assert_eq!(assign.assignment, vec![0]);
    }

    #[test]
    fn assignment_matches_bruteforce_scan() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let pts = random_matrix(&mut r, 16, 6);
            let mut tape = Tape::new();
            let p = tape.input(&pts, false);
            let c = propose_centers(&mut tape, p, 4, 4, 4).unwrap();
            let centers = tape.value(c).to_vec();
            let (_, assign) = cluster_assign(&mut tape, c, p);
            assert!(assign.is_partition(16));
            for i in 0..16 {
                let pt = &pts.data[i * 6..(i + 1) * 6];
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..4 {
                    let v = cos_ref(&centers[k * 6..(k + 1) * 6], pt);
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                assert_eq!(assign.assignment[i] as usize, best, "point {i} seed {seed}");
            }
        }
    }

    #[test]
    fn tie_break_takes_lowest_center() {
        // two identical centers: every point ties, all must go to center 0
        let mut tape = Tape::<f64>::new();
        let centers = tape.constant(&[1.0, 1.0, 1.0, 1.0], &[2, 2]);
        let points = tape.constant(&[0.5, 0.5, 2.0, 2.0], &[2, 2]);
        let (_, assign) = cluster_assign(&mut tape, centers, points);
        assert_eq!(assign.assignment, vec![0, 0]);
    }

    #[test]
    fn empty_cluster_keeps_center_value() {
        // one point, two centers; cluster 1 stays empty
        let mut tape = Tape::<f64>::new();
        let sim = tape.constant(&[0.9, -0.9], &[2, 1]);
        let assign = ClusterAssignment { n_centers: 2, assignment: vec![0], members: vec![vec![0], vec![]] };
        let membership = membership_matrix(&mut tape, &assign);
        let gain = tape.constant(&[1.0], &[1]);
        let shift = tape.constant(&[0.0], &[1]);
        let gate = cluster_gate(&mut tape, sim, membership, gain, shift);
        let values = tape.constant(&[0.3, 0.7], &[1, 2]);
        let centers_v = tape.constant(&[1.0, 2.0, -5.0, 4.0], &[2, 2]);
        let g = aggregate_clusters(&mut tape, values, centers_v, membership, gate);
        let got = tape.value(g);
        assert!((got[2] - -5.0).abs() < 1e-12, "empty cluster center survives");
        assert!((got[3] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn one_member_with_neutral_gate() {
        // gain=1, shift=0, similarity 0 -> gate exactly 0.5
        // g = ([1,0] + 0.5*[0,1]) / 1.5 = [2/3, 1/3]
        let mut tape = Tape::<f64>::new();
        let sim = tape.constant(&[0.0], &[1, 1]);
        let assign = ClusterAssignment { n_centers: 1, assignment: vec![0], members: vec![vec![0]] };
        let membership = membership_matrix(&mut tape, &assign);
        let gain = tape.constant(&[1.0], &[1]);
        let shift = tape.constant(&[0.0], &[1]);
        let gate = cluster_gate(&mut tape, sim, membership, gain, shift);
        let values = tape.constant(&[0.0, 1.0], &[1, 2]);
        let centers_v = tape.constant(&[1.0, 0.0], &[1, 2]);
        let g = aggregate_clusters(&mut tape, values, centers_v, membership, gate);
        let got = tape.value(g);
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    // Scalar-loop reference for the aggregation, independent of tape ops.
    fn aggregate_ref(
        values: &[f64],
        centers_v: &[f64],
        sim: &[f64],
        assignment: &[u32],
        d: usize,
        c: usize,
        gain: f64,
        shift: f64,
    ) -> Vec<f64> {
        let n = assignment.len();
        let mut out = vec![0.0; c * d];
        for k in 0..c {
            let mut acc: Vec<f64> = centers_v[k * d..(k + 1) * d].to_vec();
            let mut denom = 1.0;
            for i in 0..n {
                if assignment[i] as usize != k {
                    continue;
                }
                let w = sig(gain * sim[k * n + i] + shift);
                denom += w;
                for j in 0..d {
                    acc[j] += w * values[i * d + j];
                }
            }
            for j in 0..d {
                out[k * d + j] = acc[j] / denom;
            }
        }
        out
    }

    #[test]
    fn aggregation_matches_scalar_loop() {
        for seed in 0..100 {
            let mut r = rng(1000 + seed);
            let m = (seed % 17) as usize; // member counts 0..=16
            let n = (m + 3).max(4);
            let d = 1 + (seed % 5) as usize;
            let c = 2;
            let values = random_matrix(&mut r, n, d);
            let centers_v = random_matrix(&mut r, c, d);
            let sim_t = random_matrix(&mut r, c, n);
            let gain = r.random_range(-2.0..2.0);
            let shift = r.random_range(-1.0..1.0);
            // first m points to cluster 0, rest to cluster 1
            let assignment: Vec<u32> = (0..n).map(|i| if i < m { 0 } else { 1 }).collect();
            let mut members = vec![Vec::new(), Vec::new()];
            for (i, &a) in assignment.iter().enumerate() {
                members[a as usize].push(i as u32);
            }
            let assign = ClusterAssignment { n_centers: c, assignment: assignment.clone(), members };

            let mut tape = Tape::new();
            let sim = tape.input(&sim_t, false);
            let membership = membership_matrix(&mut tape, &assign);
            let gv = tape.constant(&[gain], &[1]);
            let sv = tape.constant(&[shift], &[1]);
            let gate = cluster_gate(&mut tape, sim, membership, gv, sv);
            let values_v = tape.input(&values, false);
            let centers_vv = tape.input(&centers_v, false);
            let g = aggregate_clusters(&mut tape, values_v, centers_vv, membership, gate);

            let want = aggregate_ref(&values.data, &centers_v.data, &sim_t.data, &assignment, d, c, gain, shift);
            for (a, b) in tape.value(g).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_dispatch_fc_is_identity() {
        let mut r = rng(7);
        let pts = random_matrix(&mut r, 6, 3);
        let agg = random_matrix(&mut r, 2, 4);
        let sim_t = random_matrix(&mut r, 2, 6);
        let assignment: Vec<u32> = vec![0, 1, 0, 1, 0, 1];
        let assign = ClusterAssignment {
            n_centers: 2,
            assignment: assignment.clone(),
            members: vec![vec![0, 2, 4], vec![1, 3, 5]],
        };
        let mut tape = Tape::new();
        let sim = tape.input(&sim_t, false);
        let membership = membership_matrix(&mut tape, &assign);
        let gv = tape.constant(&[1.0], &[1]);
        let sv = tape.constant(&[0.0], &[1]);
        let gate = cluster_gate(&mut tape, sim, membership, gv, sv);
        let p = tape.input(&pts, false);
        let a = tape.input(&agg, false);
        let w = tape.constant(&vec![0.0; 4 * 3], &[4, 3]);
        let b = tape.constant(&[0.0; 3], &[3]);
        let out = dispatch_to_points(&mut tape, p, a, &assign, gate, w, b);
        assert_eq!(tape.value(out), pts.data.as_slice());
    }

    #[test]
    fn dispatch_matches_per_point_loop() {
        for seed in 0..100 {
            let mut r = rng(2000 + seed);
            let (n, c, dv, d) = (8usize, 4usize, 3usize, 5usize);
            let pts = random_matrix(&mut r, n, d);
            let agg = random_matrix(&mut r, c, dv);
            let sim_t = random_matrix(&mut r, c, n);
            let w = random_matrix(&mut r, dv, d);
            let b = random_matrix(&mut r, 1, d);
            let gain = r.random_range(-2.0..2.0);
            let shift = r.random_range(-1.0..1.0);
            let assignment: Vec<u32> = (0..n).map(|_| r.random_range(0..c as u32)).collect();
            let mut members = vec![Vec::new(); c];
            for (i, &a) in assignment.iter().enumerate() {
                members[a as usize].push(i as u32);
            }
            let assign = ClusterAssignment { n_centers: c, assignment: assignment.clone(), members };

            let mut tape = Tape::new();
            let sim = tape.input(&sim_t, false);
            let membership = membership_matrix(&mut tape, &assign);
            let gv = tape.constant(&[gain], &[1]);
            let sv = tape.constant(&[shift], &[1]);
            let gate = cluster_gate(&mut tape, sim, membership, gv, sv);
            let pv = tape.input(&pts, false);
            let av = tape.input(&agg, false);
            let wv = tape.input(&w, false);
            let bv = tape.input(&b, false);
            let out = dispatch_to_points(&mut tape, pv, av, &assign, gate, wv, bv);

            // per-point reference
            for i in 0..n {
                let k = assignment[i] as usize;
                let gt = sig(gain * sim_t.data[k * n + i] + shift);
                for j in 0..d {
                    let mut fc = b.data[j];
                    for q in 0..dv {
                        fc += gt * agg.data[k * dv + q] * w.data[q * d + j];
                    }
                    let want = pts.data[i * d + j] + fc;
                    let got = tape.value(out)[i * d + j];
                    assert!((got - want).abs() < 1e-12, "seed {seed} point {i} dim {j}");
                }
            }
        }
    }

    #[test]
    fn block_with_zero_fc_weights_is_identity() {
        let mut r = rng(11);
        let mut bank = ParamBank::<f64>::new();
        let block = ClusterBlock::new(&mut bank, "t", 5, 2, 3, 4, 1, &mut r).unwrap();
        // zero every FC weight and bias; layer-norm gains stay 1
        for id in bank.ids().collect::<Vec<_>>() {
            let name = bank.name(id).to_string();
            if name.contains(".w") || name.contains(".b_") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".b") {
                let t = bank.get_mut(id);
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let pts = random_matrix(&mut r, 12, 5);
        let mut tape = Tape::new();
        let x = tape.input(&pts, false);
        let out = block.forward(&mut tape, &bank, x, 1, 4, 3, None).unwrap();
        for (a, b) in tape.value(out).iter().zip(&pts.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_layer_equals_composed_ops() {
        let mut r = rng(13);
        let mut bank = ParamBank::<f64>::new();
        let layer = ClusterLayer::new(&mut bank, "t", 4, 1, 6, 4, &mut r).unwrap();
        let (h, w) = (4usize, 4usize);
        let pts = random_matrix(&mut r, h * w, 4);

        let mut tape = Tape::new();
        let x = tape.input(&pts, false);
        let fused = layer.forward(&mut tape, &bank, x, 1, h, w, None).unwrap();
        let via_layer = tape.add(x, fused);

        // composed: project, pool, assign, aggregate, dispatch (+ residual)
        let pos = tape.constant_owned(grid_positions::<f64>(h, w), &[h * w, 2]);
        let xp = tape.concat_cols(&[x, pos]);
        let w_sim = tape.param(&bank, layer.w_sim);
        let b_sim = tape.param(&bank, layer.b_sim);
        let w_val = tape.param(&bank, layer.w_val);
        let b_val = tape.param(&bank, layer.b_val);
        let p_s = tape.linear(xp, w_sim, b_sim);
        let p_v = tape.linear(xp, w_val, b_val);
        let centers_s = propose_centers(&mut tape, p_s, h, w, 4).unwrap();
        let centers_v = propose_centers(&mut tape, p_v, h, w, 4).unwrap();
        let (sim, assign) = cluster_assign(&mut tape, centers_s, p_s);
        let membership = membership_matrix(&mut tape, &assign);
        let gain = tape.param(&bank, layer.sim_gain);
        let shift = tape.param(&bank, layer.sim_shift);
        let gate = cluster_gate(&mut tape, sim, membership, gain, shift);
        let agg = aggregate_clusters(&mut tape, p_v, centers_v, membership, gate);
        let w_fuse = tape.param(&bank, layer.w_fuse);
        let b_fuse = tape.param(&bank, layer.b_fuse);
        let composed = dispatch_to_points(&mut tape, x, agg, &assign, gate, w_fuse, b_fuse);

        for (a, b) in tape.value(via_layer).iter().zip(tape.value(composed)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn increaser_grows_one_point_to_2x2() {
        let mut r = rng(17);
        let mut bank = ParamBank::<f64>::new();
        let inc = PointIncreaser::new(&mut bank, "t", 2, 128, 64, &mut r).unwrap();
        let mut tape = Tape::new();
        let z = random_matrix(&mut r, 1, 128);
        let x = tape.input(&z, false);
        let (out, h, w) = inc.forward(&mut tape, &bank, x, 1, 1, 1).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(tape.shape(out), &[4, 64]);
    }

    #[test]
    fn increaser_r7_grows_4x4_to_28x28() {
        let mut r = rng(18);
        let mut bank = ParamBank::<f64>::new();
        let inc = PointIncreaser::new(&mut bank, "t", 7, 8, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let z = random_matrix(&mut r, 16, 8);
        let x = tape.input(&z, false);
        let (out, h, w) = inc.forward(&mut tape, &bank, x, 1, 4, 4).unwrap();
        assert_eq!((h, w), (28, 28));
        assert_eq!(tape.shape(out), &[784, 2]);
    }

    #[test]
    fn unit_ratio_identity_weights_pass_features_through() {
        let mut r = rng(19);
        let mut bank = ParamBank::<f64>::new();
        let inc = PointIncreaser::new(&mut bank, "t", 1, 3, 3, &mut r).unwrap();
        // overwrite with identity
        {
            let t = bank.get_mut(inc.w);
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..3 {
                t.data[i * 3 + i] = 1.0;
            }
            bank.get_mut(inc.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let pts = random_matrix(&mut r, 6, 3);
        let mut tape = Tape::new();
        let x = tape.input(&pts, false);
        let (out, h, w) = inc.forward(&mut tape, &bank, x, 1, 2, 3).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(tape.value(out), pts.data.as_slice());
    }

    #[test]
    fn reducer_shrinks_28_to_14_and_7_to_1() {
        let mut r = rng(20);
        let mut bank = ParamBank::<f64>::new();
        let red2 = PointReducer::new(&mut bank, "a", 2, 1, 32, &mut r).unwrap();
        let red7 = PointReducer::new(&mut bank, "b", 7, 3, 5, &mut r).unwrap();
        let mut tape = Tape::new();
        let img = random_matrix(&mut r, 784, 1);
        let x = tape.input(&img, false);
        let (out, h, w) = red2.forward(&mut tape, &bank, x, 1, 28, 28).unwrap();
        assert_eq!((h, w), (14, 14));
        assert_eq!(tape.shape(out), &[196, 32]);

        let small = random_matrix(&mut r, 49, 3);
        let s = tape.input(&small, false);
        let (out7, h7, w7) = red7.forward(&mut tape, &bank, s, 1, 7, 7).unwrap();
        assert_eq!((h7, w7), (1, 1));
        assert_eq!(tape.shape(out7), &[1, 5]);
    }

    #[test]
    fn indivisible_grid_is_config_error() {
        let mut r = rng(21);
        let mut bank = ParamBank::<f64>::new();
        let red = PointReducer::new(&mut bank, "t", 3, 1, 4, &mut r).unwrap();
        let mut tape = Tape::new();
        let img = random_matrix(&mut r, 784, 1);
        let x = tape.input(&img, false);
        assert!(red.forward(&mut tape, &bank, x, 1, 28, 28).is_err());
    }

    #[test]
    fn increase_then_reduce_with_inverse_weights_roundtrips() {
        let (d, r_ratio) = (3usize, 2usize);
        let mut r = rng(22);
        let mut bank = ParamBank::<f64>::new();
        let inc = PointIncreaser::new(&mut bank, "up", r_ratio, d, d, &mut r).unwrap();
        let red = PointReducer::new(&mut bank, "down", r_ratio, d, d, &mut r).unwrap();
        // increaser copies the parent feature into each of the 4 children
        {
            let t = bank.get_mut(inc.w);
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for child in 0..r_ratio * r_ratio {
                for j in 0..d {
                    t.data[j * (r_ratio * r_ratio * d) + child * d + j] = 1.0;
                }
            }
            bank.get_mut(inc.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
        // reducer averages the 4 children back
        {
            let t = bank.get_mut(red.w);
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for child in 0..r_ratio * r_ratio {
                for j in 0..d {
                    t.data[(child * d + j) * d + j] = 0.25;
                }
            }
            bank.get_mut(red.b).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let pts = random_matrix(&mut r, 4 * 6, d);
        let mut tape = Tape::new();
        let x = tape.input(&pts, false);
        let (up, h, w) = inc.forward(&mut tape, &bank, x, 2, 2, 6).unwrap();
        let (back, h2, w2) = red.forward(&mut tape, &bank, up, 2, h, w).unwrap();
        assert_eq!((h2, w2), (2, 6));
        for (a, b) in tape.value(back).iter().zip(&pts.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
