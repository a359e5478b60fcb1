//! Hard-instance generators: block-free matrices, the matrix-derived policy
//! class, combination-lock MDPs with a Good/Bad decoder, and the bandit
//! embedding on a capacity witness.
//!
//! Lock `j` owns the state pair `(2j, 2j+1)` in every layer. Index `2j` is
//! the lock's "primary" state `j[h]` and `2j+1` its twin `j'[h]`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::capacity::Witness;
use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, MdpBuilder, RewardDist};
use crate::policy::{ClassTag, Policy, PolicyClass};
use crate::universe::{StateId, Universe};

/// Largest number of column subsets the block-free check will visit.
pub const BLOCKFREE_GUARD: u128 = 100_000_000;

/// Per-column rejection attempts in column-conditioned sampling.
const COLUMN_TRIES: usize = 1_000_000;

/// `round(1 / (6 eps^ell))`.
pub fn matrix_rows(eps: f64, ell: usize) -> usize {
    (1.0 / (6.0 * eps.powi(ell as i32))).round() as usize
}

/// `ceil(ell * log2 d)`.
pub fn block_rows(ell: usize, d: usize) -> usize {
    (ell as f64 * (d as f64).log2()).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockFreeMatrix {
    pub rows: Vec<Vec<bool>>,
    pub eps: f64,
    pub ell: usize,
    /// All-ones blocks must have fewer than `k` rows.
    pub k: usize,
}

impl BlockFreeMatrix {
    pub fn new(rows: Vec<Vec<bool>>, eps: f64, ell: usize, k: usize) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid("matrix must have at least one row and column"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged matrix rows"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("eps = {eps} must lie in (0, 1)")));
        }
        if ell == 0 || k == 0 {
            return Err(Error::invalid("block shape must be at least 1 x 1"));
        }
        Ok(BlockFreeMatrix { rows, eps, ell, k })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().filter(|&&b| b).count()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.d()).map(|j| self.rows.iter().filter(|r| r[j]).count()).collect()
    }

    pub fn check(&self) -> Result<MatrixCheck> {
        let n = self.n() as f64;
        let d = self.d() as f64;
        let rs = self.row_sums();
        let cs = self.col_sums();
        let row_sum = rs.iter().all(|&x| x as f64 >= self.eps * d / 2.0);
        let col_sum = cs.iter().all(|&x| {
            let x = x as f64;
            x >= self.eps * n / 2.0 && x <= 2.0 * self.eps * n
        });
        Ok(MatrixCheck {
            row_sum,
            col_sum,
            block_free: is_block_free(&self.rows, self.k, self.ell)?,
            min_row_sum: rs.iter().copied().min().unwrap_or(0),
            min_col_sum: cs.iter().copied().min().unwrap_or(0),
            max_col_sum: cs.iter().copied().max().unwrap_or(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MatrixCheck {
    pub row_sum: bool,
    pub col_sum: bool,
    pub block_free: bool,
    pub min_row_sum: usize,
    pub min_col_sum: usize,
    pub max_col_sum: usize,
}

impl MatrixCheck {
    pub fn passed(&self) -> bool {
        self.row_sum && self.col_sum && self.block_free
    }
}

fn binom(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// True iff no `k x ell` submatrix is all ones.
///
/// Walks every `ell`-subset of columns and counts the rows that are one on
/// all of them; a block exists iff some count reaches `k`.
pub fn is_block_free(rows: &[Vec<bool>], k: usize, ell: usize) -> Result<bool> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if k > n || ell > d {
        return Ok(true);
    }
    let subsets = binom(d, ell);
    if subsets > BLOCKFREE_GUARD {
        return Err(Error::Guard(format!(
            "block-free check would visit {subsets} column subsets (limit {BLOCKFREE_GUARD})"
        )));
    }
    let words = n.div_ceil(64);
    let cols: Vec<Vec<u64>> = (0..d)
        .map(|j| {
            let mut bits = vec![0u64; words];
            for (i, r) in rows.iter().enumerate() {
                if r[j] {
                    bits[i / 64] |= 1 << (i % 64);
                }
            }
            bits
        })
        .collect();

    fn dfs(cols: &[Vec<u64>], from: usize, left: usize, mask: &[u64], k: usize) -> bool {
        let count: u32 = mask.iter().map(|w| w.count_ones()).sum();
        if (count as usize) < k {
            return false;
        }
        if left == 0 {
            return true;
        }
        for j in from..cols.len() {
            let next: Vec<u64> = mask.iter().zip(&cols[j]).map(|(a, b)| a & b).collect();
            if dfs(cols, j + 1, left - 1, &next, k) {
                return true;
            }
        }
        false
    }

    let found = (0..d).into_par_iter().any(|j0| dfs(&cols, j0 + 1, ell - 1, &cols[j0], k));
    Ok(!found)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SamplingMode {
    /// Every entry i.i.d. Ber(eps).
    Iid,
    /// Each column i.i.d. Ber(eps) conditioned on its sum lying in the allowed range.
    ColumnConditioned,
}

fn sample_column<R: Rng + ?Sized>(n: usize, eps: f64, lo: usize, hi: usize, rng: &mut R) -> Result<Vec<bool>> {
    for _ in 0..COLUMN_TRIES {
        let col: Vec<bool> = (0..n).map(|_| rng.gen_bool(eps)).collect();
        let s = col.iter().filter(|&&b| b).count();
        if s >= lo && s <= hi {
            return Ok(col);
        }
    }
    Err(Error::Budget(format!("no column with sum in [{lo}, {hi}] after {COLUMN_TRIES} draws")))
}

/// One draw of an `N x d` matrix with `N = matrix_rows(eps, ell)`.
pub fn draw_matrix<R: Rng + ?Sized>(eps: f64, ell: usize, d: usize, mode: SamplingMode, rng: &mut R) -> Result<BlockFreeMatrix> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("eps = {eps} must lie in (0, 1)")));
    }
    let n = matrix_rows(eps, ell);
    if n == 0 || d == 0 || ell == 0 {
        return Err(Error::invalid(format!("degenerate matrix shape N = {n}, d = {d}, ell = {ell}")));
    }
    let k = block_rows(ell, d).max(1);
    let mut rows = vec![vec![false; d]; n];
    match mode {
        SamplingMode::Iid => {
            for r in rows.iter_mut() {
                for x in r.iter_mut() {
                    *x = rng.gen_bool(eps);
                }
            }
        }
        SamplingMode::ColumnConditioned => {
            let lo = (eps * n as f64 / 2.0).ceil() as usize;
            let hi = ((2.0 * eps * n as f64).floor() as usize).min(n);
            if lo > hi {
                return Err(Error::invalid(format!("no integer column sum lies in [{}, {}]", eps * n as f64 / 2.0, 2.0 * eps * n as f64)));
            }
            for j in 0..d {
                let col = sample_column(n, eps, lo, hi, rng)?;
                for (r, b) in rows.iter_mut().zip(col) {
                    r[j] = b;
                }
            }
        }
    }
    BlockFreeMatrix::new(rows, eps, ell, k)
}

/// Redraws until all three properties hold.
pub fn sample_blockfree_matrix<R: Rng + ?Sized>(
    eps: f64,
    ell: usize,
    d: usize,
    mode: SamplingMode,
    rng: &mut R,
    max_retries: usize,
) -> Result<(BlockFreeMatrix, usize)> {
    let mut fails = [0usize; 3];
    for attempt in 1..=max_retries.max(1) {
        let m = draw_matrix(eps, ell, d, mode, rng)?;
        let c = m.check()?;
        if c.passed() {
            return Ok((m, attempt));
        }
        fails[0] += !c.row_sum as usize;
        fails[1] += !c.col_sum as usize;
        fails[2] += !c.block_free as usize;
    }
    let names = ["row sum", "column sum", "block-free"];
    let worst = (0..3).max_by_key(|&i| (fails[i], std::cmp::Reverse(i))).expect("three properties");
    Err(Error::Budget(format!(
        "no valid matrix in {} draws; {} failed most often ({} of them)",
        max_retries.max(1),
        names[worst],
        fails[worst]
    )))
}

/// The `2J`-wide, horizon-`H`, binary-action universe of the lock family.
pub fn lock_universe(locks: usize, h: usize) -> Result<Universe> {
    if locks == 0 {
        return Err(Error::invalid("need at least one lock"));
    }
    Universe::uniform(2 * locks, h, 2)
}

/// Member `i` plays `bit_h(sum_{a <= i} B_aj)` on both states of lock `j` if `B_ij = 1`, else 0.
pub fn build_pi_ell(b: &BlockFreeMatrix, h: usize, locks: usize) -> Result<PolicyClass> {
    if b.d() != locks {
        return Err(Error::invalid(format!("matrix has {} columns for {locks} locks", b.d())));
    }
    let max_col = b.col_sums().into_iter().max().unwrap_or(0);
    if h < usize::BITS as usize && max_col >= 1usize << h {
        return Err(Error::invalid(format!("column sum {max_col} does not fit in {h} bits")));
    }
    let u = lock_universe(locks, h)?;
    let mut running = vec![0usize; locks];
    let mut members = Vec::with_capacity(b.n());
    for row in &b.rows {
        let mut p = Policy::zeros(&u);
        for (j, &bit) in row.iter().enumerate() {
            if !bit {
                continue;
            }
            running[j] += 1;
            for layer in 1..=h {
                let a = (running[j] >> (layer - 1)) & 1;
                p.set(StateId::new(layer, 2 * j), a);
                p.set(StateId::new(layer, 2 * j + 1), a);
            }
        }
        members.push(p);
    }
    PolicyClass::dedup(u, members, ClassTag::PiEll)
}

/// Members playing 1 somewhere on lock `j`'s primary states.
pub fn lock_members(class: &PolicyClass, j: usize) -> Vec<usize> {
    let h_max = class.horizon();
    (0..class.len())
        .filter(|&i| (1..=h_max).any(|h| class.member(i).action_at(h, 2 * j) == 1))
        .collect()
}

/// Locks on which `policy` plays 1 somewhere.
pub fn relevant_locks(policy: &Policy, locks: usize, h: usize) -> Vec<usize> {
    (0..locks).filter(|&j| (1..=h).any(|l| policy.action_at(l, 2 * j) == 1)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PiEllCheck {
    /// Every `|Pi_j|` lies in `[eps N / 2, 2 eps N]`.
    pub lock_sizes: bool,
    /// Every member has at least `eps J / 2` relevant locks.
    pub relevant_counts: bool,
    /// On each lock, members in `Pi_j` have distinct action vectors and play the same on both states.
    pub unique_vectors: bool,
    /// `pi(j[h]) == pi(j'[h])` for every member, lock and layer.
    pub twin_agreement: bool,
}

impl PiEllCheck {
    pub fn passed(&self) -> bool {
        self.lock_sizes && self.relevant_counts && self.unique_vectors && self.twin_agreement
    }
}

/// Properties (1)-(3) of the lock class, evaluated on the class itself with `N = |class|`.
pub fn check_pi_ell(class: &PolicyClass, eps: f64, locks: usize) -> PiEllCheck {
    let h_max = class.horizon();
    let n = class.len() as f64;
    let vector = |p: &Policy, idx: usize| -> Vec<usize> { (1..=h_max).map(|h| p.action_at(h, idx)).collect() };
    let mut lock_sizes = true;
    let mut unique_vectors = true;
    for j in 0..locks {
        let mem = lock_members(class, j);
        let size = mem.len() as f64;
        lock_sizes &= size >= eps * n / 2.0 && size <= 2.0 * eps * n;
        let mut seen = std::collections::HashSet::new();
        for &i in &mem {
            let p = class.member(i);
            let v = vector(p, 2 * j);
            unique_vectors &= v == vector(p, 2 * j + 1) && seen.insert(v);
        }
    }
    let relevant_counts = class
        .members()
        .iter()
        .all(|p| relevant_locks(p, locks, h_max).len() as f64 >= eps * locks as f64 / 2.0);
    let twin_agreement = class.members().iter().all(|p| {
        (1..=h_max).all(|h| (0..locks).all(|j| p.action_at(h, 2 * j) == p.action_at(h, 2 * j + 1)))
    });
    PiEllCheck { lock_sizes, relevant_counts, unique_vectors, twin_agreement }
}

/// Which state of each lock pair is Good.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    /// `primary_good[j][h-1]`: true when `j[h]` (index `2j`) is Good. Always true at layer 1.
    pub primary_good: Vec<Vec<bool>>,
}

impl Decoder {
    pub fn new(primary_good: Vec<Vec<bool>>) -> Result<Self> {
        let h = primary_good.first().map_or(0, |r| r.len());
        if primary_good.is_empty() || h == 0 || primary_good.iter().any(|r| r.len() != h) {
            return Err(Error::invalid("decoder needs one nonempty row of equal length per lock"));
        }
        if primary_good.iter().any(|r| !r[0]) {
            return Err(Error::invalid("layer-1 Good state must be the lock root"));
        }
        Ok(Decoder { primary_good })
    }

    /// Fair coin per (lock, layer >= 2).
    pub fn sample<R: Rng + ?Sized>(locks: usize, h: usize, rng: &mut R) -> Self {
        let primary_good = (0..locks)
            .map(|_| (1..=h).map(|l| l == 1 || rng.gen_bool(0.5)).collect())
            .collect();
        Decoder { primary_good }
    }

    pub fn locks(&self) -> usize {
        self.primary_good.len()
    }

    pub fn horizon(&self) -> usize {
        self.primary_good[0].len()
    }

    pub fn good(&self, j: usize, h: usize) -> usize {
        if self.primary_good[j][h - 1] {
            2 * j
        } else {
            2 * j + 1
        }
    }

    pub fn bad(&self, j: usize, h: usize) -> usize {
        self.good(j, h) ^ 1
    }
}

fn uniform_roots(locks: usize) -> Vec<f64> {
    let mut init = vec![0.0; 2 * locks];
    for j in 0..locks {
        init[2 * j] = 1.0 / locks as f64;
    }
    init
}

fn uniform_pair(locks: usize, j: usize) -> Vec<f64> {
    let mut row = vec![0.0; 2 * locks];
    row[2 * j] = 0.5;
    row[2 * j + 1] = 0.5;
    row
}

#[derive(Clone, Debug)]
pub struct HardInstance {
    pub class: PolicyClass,
    pub pistar: usize,
    pub decoder: Decoder,
    pub locks: usize,
    pub horizon: usize,
    /// Locks where the planted member plays 1 somewhere, ascending.
    pub relevant: Vec<usize>,
    pub mdp: LayeredMdp,
}

fn lock_dynamics(class: &PolicyClass, pistar: usize, decoder: &Decoder, terminal_bonus: bool) -> Result<(MdpBuilder, Vec<usize>)> {
    let h_max = class.horizon();
    let locks = decoder.locks();
    if pistar >= class.len() {
        return Err(Error::invalid(format!("planted index {pistar} outside class of {}", class.len())));
    }
    if decoder.horizon() != h_max {
        return Err(Error::invalid("decoder horizon differs from the class horizon"));
    }
    let u = lock_universe(locks, h_max)?;
    if class.universe() != &u {
        return Err(Error::invalid("class does not live on the lock universe"));
    }
    let star = class.member(pistar);
    let relevant = relevant_locks(star, locks, h_max);
    let mut is_rel = vec![false; locks];
    relevant.iter().for_each(|&j| is_rel[j] = true);
    let mut b = MdpBuilder::new(u);
    b.init(uniform_roots(locks));
    for j in 0..locks {
        for h in 1..=h_max {
            let g = decoder.good(j, h);
            for s in [2 * j, 2 * j + 1] {
                let st = StateId::new(h, s);
                for a in 0..2 {
                    if h < h_max {
                        if is_rel[j] {
                            let next = if s == g && a == star.action(st) { decoder.good(j, h + 1) } else { decoder.bad(j, h + 1) };
                            b.goto(st, a, next);
                        } else {
                            b.transition(st, a, uniform_pair(locks, j));
                        }
                    } else {
                        let bonus = terminal_bonus && is_rel[j] && s == g && a == star.action(st);
                        b.reward(st, a, RewardDist::Bernoulli(if bonus { 0.75 } else { 0.5 }));
                    }
                }
            }
        }
    }
    Ok((b, relevant))
}

/// The lock MDP planted at member `pistar` under `decoder`.
pub fn build_hard_mdp(class: &PolicyClass, pistar: usize, decoder: &Decoder) -> Result<HardInstance> {
    let (b, relevant) = lock_dynamics(class, pistar, decoder, true)?;
    Ok(HardInstance {
        class: class.clone(),
        pistar,
        decoder: decoder.clone(),
        locks: decoder.locks(),
        horizon: class.horizon(),
        relevant,
        mdp: b.build()?,
    })
}

/// Same dynamics as the planted instance, Ber(1/2) at every terminal pair.
pub fn build_null_reward_mdp(instance: &HardInstance) -> Result<LayeredMdp> {
    let (b, _) = lock_dynamics(&instance.class, instance.pistar, &instance.decoder, false)?;
    b.build()
}

/// All locks uniform, Ber(1/2) terminal rewards.
pub fn build_reference_mdp(locks: usize, h: usize) -> Result<LayeredMdp> {
    let u = lock_universe(locks, h)?;
    let mut b = MdpBuilder::new(u);
    b.init(uniform_roots(locks));
    for j in 0..locks {
        for l in 1..=h {
            for s in [2 * j, 2 * j + 1] {
                for a in 0..2 {
                    let st = StateId::new(l, s);
                    if l < h {
                        b.transition(st, a, uniform_pair(locks, j));
                    } else {
                        b.reward(st, a, RewardDist::Bernoulli(0.5));
                    }
                }
            }
        }
    }
    b.build()
}

/// `1/2 + 1/4 * Pr[root lock is relevant and the policy follows the planted actions along its Good chain]`.
pub fn exact_value_hard(instance: &HardInstance, policy: &Policy) -> Result<f64> {
    if !policy.fits(instance.class.universe()) {
        return Err(Error::invalid("policy does not fit the lock universe"));
    }
    let star = instance.class.member(instance.pistar);
    let solved = instance
        .relevant
        .iter()
        .filter(|&&j| {
            (1..=instance.horizon).all(|h| {
                let g = instance.decoder.good(j, h);
                policy.action_at(h, g) == star.action_at(h, g)
            })
        })
        .count();
    Ok(0.5 + 0.25 * solved as f64 / instance.locks as f64)
}

#[derive(Clone, Debug)]
pub struct BanditEmbedding {
    pub mdp: LayeredMdp,
    /// Arm `i` is the witness pair `arms[i]` at the witness layer.
    pub arms: Vec<(StateId, usize)>,
    /// `member_arm[m]`: the arm class member `m` pulls.
    pub member_arm: Vec<usize>,
}

/// Puts a Bernoulli arm on each pair the class reaches at the witness layer; all other rewards 0.
pub fn build_bandit_embedding(class: &PolicyClass, witness: &Witness, arm_means: &[f64]) -> Result<BanditEmbedding> {
    let w = &witness.mdp;
    if class.universe() != w.universe() {
        return Err(Error::invalid("witness and class live on different universes"));
    }
    if !w.is_deterministic() {
        return Err(Error::invalid("witness MDP is not deterministic"));
    }
    let reached: Vec<(StateId, usize)> = class
        .members()
        .iter()
        .map(|p| {
            let mut s = w.det_start();
            while s.layer < witness.layer {
                s = w.det_next(s, p.action(s)).expect("not the last layer");
            }
            (s, p.action(s))
        })
        .collect();
    let mut arms = reached.clone();
    arms.sort();
    arms.dedup();
    if arm_means.len() != arms.len() {
        return Err(Error::invalid(format!("{} arm means for {} arms", arm_means.len(), arms.len())));
    }
    if let Some(m) = arm_means.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::invalid(format!("arm mean {m} outside [0, 1]")));
    }
    let mut b = MdpBuilder::new(w.universe().clone());
    b.init(w.init().to_vec());
    let states: Vec<StateId> = w.universe().states().collect();
    for s in states {
        for a in 0..w.actions() {
            if s.layer < w.horizon() {
                b.transition(s, a, w.transition(s, a).to_vec());
            }
        }
    }
    for (&(s, a), &m) in arms.iter().zip(arm_means) {
        b.reward(s, a, RewardDist::Bernoulli(m));
    }
    let member_arm = reached.iter().map(|x| arms.binary_search(x).expect("arm listed")).collect();
    Ok(BanditEmbedding { mdp: b.build()?, arms, member_arm })
}
