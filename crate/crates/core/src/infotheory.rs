//! Exact information measures on small discrete joint distributions.
//!
//! Tables are dense and tiny (at most 4 variables, 16 values each), so
//! every measure is an exhaustive sum with the 0 log 0 = 0 convention and
//! no clamping anywhere. Logarithms are base 2: values are bits.
//!
//! Each measure is computed from its own defining sum, not from other
//! measures, so identity checks compare genuinely independent
//! computations. The one exception is the three-way interaction
//! information, which is defined as a difference and may legitimately be
//! negative; it is reported as is.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Result};

/// Mass must match 1 this closely at construction.
pub const MASS_TOL: f64 = 1e-12;
/// Most variables a table may hold.
pub const MAX_VARS: usize = 4;
/// Largest alphabet per variable.
pub const MAX_ALPHABET: usize = 16;

/// Dense joint distribution over named discrete variables, row-major in
/// declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    names: Vec<String>,
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(names: Vec<String>, sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if names.is_empty() || names.len() > MAX_VARS {
            return Err(Error::invalid(format!(
                "table needs 1..={MAX_VARS} variables, got {}",
                names.len()
            )));
        }
        if names.len() != sizes.len() {
            return Err(Error::invalid(format!(
                "{} names for {} sizes",
                names.len(),
                sizes.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate variable name {a:?}")));
            }
        }
        if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > MAX_ALPHABET) {
            return Err(Error::invalid(format!(
                "alphabet size {bad} out of range 1..={MAX_ALPHABET}"
            )));
        }
        let cells: usize = sizes.iter().product();
        if probs.len() != cells {
            return Err(Error::invalid(format!(
                "sizes {sizes:?} need {cells} cells, got {}",
                probs.len()
            )));
        }
        if let Some(&bad) = probs.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(format!("probability {bad} is not in [0,1]")));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!(
                "probability mass {mass} is not 1 within {MASS_TOL:e}"
            )));
        }
        Ok(JointTable {
            names,
            sizes,
            probs,
        })
    }

    /// Random table with the given fraction of cells forced to zero,
    /// normalized to unit mass. Deterministic in the generator state.
    pub fn random(
        rng: &mut ChaCha8Rng,
        names: &[&str],
        sizes: &[usize],
        zero_fraction: f64,
    ) -> Result<Self> {
        let cells: usize = sizes.iter().product();
        let mut probs = vec![0.0; cells];
        let mut mass = 0.0;
        for p in probs.iter_mut() {
            let keep = rng.random_range(0.0..1.0) >= zero_fraction;
            if keep {
                *p = rng.random_range(0.0..1.0);
                mass += *p;
            }
        }
        if mass == 0.0 {
            probs[0] = 1.0;
            mass = 1.0;
        }
        for p in probs.iter_mut() {
            *p /= mass;
        }
        // Renormalization drift must stay inside the constructor gate.
        let total: f64 = probs.iter().sum();
        let last = probs.len() - 1;
        probs[last] += 1.0 - total;
        if probs[last] < 0.0 {
            probs[last] = 0.0;
        }
        JointTable::new(
            names.iter().map(|s| s.to_string()).collect(),
            sizes.to_vec(),
            probs,
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Dense marginal over the listed variable indices, in that order.
    /// A repeated index lands mass on the diagonal, which makes
    /// self-information queries like I(A;A) behave correctly.
    fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let out_sizes: Vec<usize> = vars.iter().map(|&v| self.sizes[v]).collect();
        let cells: usize = out_sizes.iter().product();
        let mut out = vec![0.0; cells];
        let n = self.names.len();
        let mut coords = vec![0usize; n];
        for (flat, &p) in self.probs.iter().enumerate() {
            let mut rem = flat;
            for i in (0..n).rev() {
                coords[i] = rem % self.sizes[i];
                rem /= self.sizes[i];
            }
            let mut sub = 0usize;
            for &v in vars {
                sub = sub * self.sizes[v] + coords[v];
            }
            out[sub] += p;
        }
        out
    }

    /// Evaluates one measure by exhaustive enumeration.
    pub fn measure(&self, m: &Measure) -> Result<f64> {
        match m {
            Measure::Entropy(vars) => {
                let idx = self.indices(vars)?;
                Ok(entropy(&self.marginal(&idx)))
            }
            Measure::CondEntropy(targets, conds) => {
                let t = self.indices(targets)?;
                let c = self.indices(conds)?;
                Ok(self.cond_entropy(&t, &c))
            }
            Measure::Mi(a, b) => {
                let (a, b) = (self.var_index(a)?, self.var_index(b)?);
                Ok(self.mi(a, b))
            }
            Measure::CondMi(a, b, c) => {
                let (a, b, c) = (
                    self.var_index(a)?,
                    self.var_index(b)?,
                    self.var_index(c)?,
                );
                Ok(self.cond_mi(a, b, c))
            }
            Measure::TripleMi(a, b, c) => {
                let (ai, bi, ci) = (
                    self.var_index(a)?,
                    self.var_index(b)?,
                    self.var_index(c)?,
                );
                Ok(self.mi(ai, bi) - self.cond_mi(ai, bi, ci))
            }
        }
    }

    fn indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.var_index(n)).collect()
    }

    /// H(T | C) = -sum p(t,c) log2 p(t,c)/p(c).
    fn cond_entropy(&self, targets: &[usize], conds: &[usize]) -> f64 {
        let mut all = targets.to_vec();
        all.extend_from_slice(conds);
        let joint = self.marginal(&all);
        let cond = self.marginal(conds);
        let t_cells: usize = targets.iter().map(|&v| self.sizes[v]).product();
        let c_cells: usize = conds.iter().map(|&v| self.sizes[v]).product();
        let mut h = 0.0;
        for tc in 0..t_cells {
            for cc in 0..c_cells {
                let p = joint[tc * c_cells + cc];
                if p > 0.0 {
                    h -= p * (p / cond[cc]).log2();
                }
            }
        }
        h
    }

    /// I(A;B) = sum p(a,b) log2 p(a,b)/(p(a)p(b)).
    fn mi(&self, a: usize, b: usize) -> f64 {
        let pab = self.marginal(&[a, b]);
        let pa = self.marginal(&[a]);
        let pb = self.marginal(&[b]);
        let nb = self.sizes[b];
        let mut i = 0.0;
        for (ai, &pav) in pa.iter().enumerate() {
            for (bi, &pbv) in pb.iter().enumerate() {
                let p = pab[ai * nb + bi];
                if p > 0.0 {
                    i += p * (p / (pav * pbv)).log2();
                }
            }
        }
        i
    }

    /// I(A;B|C) = sum p(a,b,c) log2 p(c)p(a,b,c)/(p(a,c)p(b,c)).
    fn cond_mi(&self, a: usize, b: usize, c: usize) -> f64 {
        let pabc = self.marginal(&[a, b, c]);
        let pac = self.marginal(&[a, c]);
        let pbc = self.marginal(&[b, c]);
        let pc = self.marginal(&[c]);
        let (na, nb, nc) = (self.sizes[a], self.sizes[b], self.sizes[c]);
        let mut i = 0.0;
        for ai in 0..na {
            for bi in 0..nb {
                for ci in 0..nc {
                    let p = pabc[(ai * nb + bi) * nc + ci];
                    if p > 0.0 {
                        i += p * (pc[ci] * p / (pac[ai * nc + ci] * pbc[bi * nc + ci])).log2();
                    }
                }
            }
        }
        i
    }
}

fn entropy(dist: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}

/// One information-measure query over named variables.
#[derive(Clone, Debug, PartialEq)]
pub enum Measure {
    /// H(A) or H(A,B): entropy of the listed variables.
    Entropy(Vec<String>),
    /// H(targets | conditions).
    CondEntropy(Vec<String>, Vec<String>),
    /// I(A;B).
    Mi(String, String),
    /// I(A;B|C).
    CondMi(String, String, String),
    /// I(A;B;C) = I(A;B) - I(A;B|C); may be negative.
    TripleMi(String, String, String),
}

impl Measure {
    /// Parses the canonical query forms: `H(A)`, `H(A,B)`, `H(A|B)`,
    /// `H(A|B,C)`, `I(A;B)`, `I(A;B|C)`, `I(A;B;C)`.
    pub fn parse(query: &str) -> Result<Measure> {
        let q: String = query.chars().filter(|c| !c.is_whitespace()).collect();
        let unknown = || Error::UnknownMeasure(query.to_string());
        let inner = |prefix: &str| -> Option<&str> {
            q.strip_prefix(prefix)
                .and_then(|rest| rest.strip_suffix(')'))
        };
        let names = |s: &str| -> Result<Vec<String>> {
            let parts: Vec<String> = s.split(',').map(|p| p.to_string()).collect();
            if parts.iter().any(|p| p.is_empty()) {
                Err(unknown())
            } else {
                Ok(parts)
            }
        };
        if let Some(body) = inner("H(") {
            return match body.split_once('|') {
                None => Ok(Measure::Entropy(names(body)?)),
                Some((t, c)) => Ok(Measure::CondEntropy(names(t)?, names(c)?)),
            };
        }
        if let Some(body) = inner("I(") {
            let (head, cond) = match body.split_once('|') {
                None => (body, None),
                Some((h, c)) => (h, Some(c)),
            };
            let parts: Vec<&str> = head.split(';').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(unknown());
            }
            return match (parts.as_slice(), cond) {
                ([a, b], None) => Ok(Measure::Mi(a.to_string(), b.to_string())),
                ([a, b], Some(c)) if !c.is_empty() && !c.contains(',') => Ok(Measure::CondMi(
                    a.to_string(),
                    b.to_string(),
                    c.to_string(),
                )),
                ([a, b, c], None) => Ok(Measure::TripleMi(
                    a.to_string(),
                    b.to_string(),
                    c.to_string(),
                )),
                _ => Err(unknown()),
            };
        }
        Err(unknown())
    }
}

/// Residuals of the three equivalent mutual-information forms, checked
/// against the defining sum on the table's first two variables.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Lemma1Residuals {
    pub via_source_entropy: f64,
    pub via_target_entropy: f64,
    pub via_joint_entropy: f64,
}

/// Residuals of the two chain decompositions on the first three
/// variables.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Lemma2Residuals {
    pub cond_entropy_chain: f64,
    pub mi_chain: f64,
}

/// Per-identity residuals for one table.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IdentityReport {
    pub lemma1: Lemma1Residuals,
    pub lemma2: Option<Lemma2Residuals>,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        let mut m = self
            .lemma1
            .via_source_entropy
            .max(self.lemma1.via_target_entropy)
            .max(self.lemma1.via_joint_entropy);
        if let Some(l2) = &self.lemma2 {
            m = m.max(l2.cond_entropy_chain).max(l2.mi_chain);
        }
        m
    }
}

/// Checks the textbook identities on a table: the three forms of mutual
/// information between the first two variables, and (when a third
/// variable exists) the chain decompositions of conditional entropy and
/// mutual information.
pub fn verify_identities(table: &JointTable) -> Result<IdentityReport> {
    let names = table.names();
    if names.len() < 2 {
        return Err(Error::invalid(
            "identity checks need at least two variables".to_string(),
        ));
    }
    let (x, y) = (names[0].clone(), names[1].clone());
    let m = |msr: &Measure| table.measure(msr);

    let i_xy = m(&Measure::Mi(x.clone(), y.clone()))?;
    let h_x = m(&Measure::Entropy(vec![x.clone()]))?;
    let h_y = m(&Measure::Entropy(vec![y.clone()]))?;
    let h_xy = m(&Measure::Entropy(vec![x.clone(), y.clone()]))?;
    let h_x_given_y = m(&Measure::CondEntropy(vec![x.clone()], vec![y.clone()]))?;
    let h_y_given_x = m(&Measure::CondEntropy(vec![y.clone()], vec![x.clone()]))?;

    let lemma1 = Lemma1Residuals {
        via_source_entropy: (i_xy - (h_x - h_x_given_y)).abs(),
        via_target_entropy: (i_xy - (h_y - h_y_given_x)).abs(),
        via_joint_entropy: (i_xy - (h_x + h_y - h_xy)).abs(),
    };

    let lemma2 = if names.len() >= 3 {
        let f = names[2].clone();
        let h_y_given_xf = m(&Measure::CondEntropy(
            vec![y.clone()],
            vec![x.clone(), f.clone()],
        ))?;
        let i_fy_given_x = m(&Measure::CondMi(f.clone(), y.clone(), x.clone()))?;
        let i_xf = m(&Measure::Mi(x.clone(), f.clone()))?;
        let i_xf_given_y = m(&Measure::CondMi(x.clone(), f.clone(), y.clone()))?;
        let triple = m(&Measure::TripleMi(x.clone(), y.clone(), f.clone()))?;
        Some(Lemma2Residuals {
            cond_entropy_chain: (h_y_given_x - (h_y_given_xf + i_fy_given_x)).abs(),
            mi_chain: (i_xf - (i_xf_given_y + triple)).abs(),
        })
    } else {
        None
    };

    Ok(IdentityReport { lemma1, lemma2 })
}

/// A two-pattern source, a deterministic combine map, and a noisy
/// feature channel: enough structure to state the decomposition theorems
/// exactly.
#[derive(Clone, Debug)]
pub struct RandomSystem {
    /// Joint law of (natural, perturbed); exactly two variables.
    base: JointTable,
    /// combine[nat * pert_size + pert] = combined value id.
    combine: Vec<u32>,
    /// Sorted distinct combined values over the full domain.
    combined_values: Vec<u32>,
    /// channel[combined index][f] = P(F = f | combined value).
    channel: Vec<Vec<f64>>,
}

impl RandomSystem {
    /// Validates and assembles a system. The combine map must be
    /// injective on the support of the base law: one combined value per
    /// supported pattern pair, or the split would lose information.
    pub fn new(base: JointTable, combine: Vec<u32>, channel: Vec<Vec<f64>>) -> Result<Self> {
        if base.names().len() != 2 {
            return Err(Error::invalid(format!(
                "system base needs exactly 2 variables, got {}",
                base.names().len()
            )));
        }
        let (ns, ps) = (base.sizes()[0], base.sizes()[1]);
        if combine.len() != ns * ps {
            return Err(Error::invalid(format!(
                "combine table has {} entries for a {ns}x{ps} domain",
                combine.len()
            )));
        }
        let mut combined_values: Vec<u32> = combine.clone();
        combined_values.sort_unstable();
        combined_values.dedup();
        if combined_values.len() > MAX_ALPHABET {
            return Err(Error::invalid(format!(
                "combine produces {} values, more than {MAX_ALPHABET}",
                combined_values.len()
            )));
        }
        // Injectivity on support: no combined value may carry two
        // supported pattern pairs.
        let mut seen: Vec<Option<usize>> = vec![None; combined_values.len()];
        for (flat, &p) in base.probs().iter().enumerate() {
            if p > 0.0 {
                let idx = combined_values
                    .binary_search(&combine[flat])
                    .expect("value present by construction");
                if let Some(prev) = seen[idx] {
                    return Err(Error::invalid(format!(
                        "combine is not injective on the support: pairs {prev} and {flat} share value {}",
                        combine[flat]
                    )));
                }
                seen[idx] = Some(flat);
            }
        }
        if channel.len() != combined_values.len() {
            return Err(Error::invalid(format!(
                "channel has {} rows for {} combined values",
                channel.len(),
                combined_values.len()
            )));
        }
        let f_size = channel.first().map(|r| r.len()).unwrap_or(0);
        if f_size == 0 || f_size > MAX_ALPHABET {
            return Err(Error::invalid(format!(
                "feature alphabet size {f_size} out of range 1..={MAX_ALPHABET}"
            )));
        }
        for (i, row) in channel.iter().enumerate() {
            if row.len() != f_size {
                return Err(Error::invalid(format!(
                    "channel row {i} has {} entries, expected {f_size}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("channel row {i} has a bad probability")));
            }
            let mass: f64 = row.iter().sum();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::invalid(format!(
                    "channel row {i} mass {mass} is not 1 within {MASS_TOL:e}"
                )));
            }
        }
        Ok(RandomSystem {
            base,
            combine,
            combined_values,
            channel,
        })
    }

    /// System whose combine map is bit-plane addition: the natural value
    /// carries the top `k` of `depth` bits per pixel, the perturbed value
    /// the rest, and combined = natural + perturbed pixelwise.
    pub fn bitplane(
        depth: u8,
        k: u8,
        pixels: usize,
        base: JointTable,
        channel: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if depth == 0 || depth > 8 {
            return Err(Error::invalid(format!("depth {depth} out of range 1..=8")));
        }
        if k > depth {
            return Err(Error::invalid(format!(
                "split plane {k} exceeds bit depth {depth}"
            )));
        }
        if pixels == 0 {
            return Err(Error::invalid("pixel count must be positive".to_string()));
        }
        let low_bits = (depth - k) as u32;
        let nat_per_pixel = 1usize << k;
        let pert_per_pixel = 1usize << low_bits;
        let nat_size = nat_per_pixel.pow(pixels as u32);
        let pert_size = pert_per_pixel.pow(pixels as u32);
        if base.sizes() != [nat_size, pert_size] {
            return Err(Error::invalid(format!(
                "base sizes {:?} do not match ({nat_size},{pert_size}) for depth {depth}, k {k}, {pixels} pixel(s)",
                base.sizes()
            )));
        }
        let mut combine = Vec::with_capacity(nat_size * pert_size);
        for ni in 0..nat_size {
            for pi in 0..pert_size {
                let mut value: u32 = 0;
                let (mut nrem, mut prem) = (ni, pi);
                for _ in 0..pixels {
                    let nat_digit = (nrem % nat_per_pixel) as u32;
                    let pert_digit = (prem % pert_per_pixel) as u32;
                    nrem /= nat_per_pixel;
                    prem /= pert_per_pixel;
                    let pixel_value = (nat_digit << low_bits) + pert_digit;
                    value = (value << depth) | pixel_value;
                }
                combine.push(value);
            }
        }
        RandomSystem::new(base, combine, channel)
    }

    /// Fully random system: random base law, a shuffled injective
    /// combine map, and random channel rows.
    pub fn random(
        rng: &mut ChaCha8Rng,
        nat_size: usize,
        pert_size: usize,
        f_size: usize,
    ) -> Result<Self> {
        let base = JointTable::random(rng, &["Xnat", "Xpert"], &[nat_size, pert_size], 0.2)?;
        let mut combine: Vec<u32> = (0..(nat_size * pert_size) as u32).collect();
        for i in (1..combine.len()).rev() {
            let j = rng.random_range(0..=i);
            combine.swap(i, j);
        }
        let rows = nat_size * pert_size;
        let mut channel = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..f_size).map(|_| rng.random_range(0.01..1.0)).collect();
            let mass: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= mass;
            }
            let total: f64 = row.iter().sum();
            let last = row.len() - 1;
            row[last] += 1.0 - total;
            channel.push(row);
        }
        RandomSystem::new(base, combine, channel)
    }

    pub fn base(&self) -> &JointTable {
        &self.base
    }

    /// Joint law of (natural, perturbed, feature).
    pub fn pattern_table(&self) -> Result<JointTable> {
        let (ns, ps) = (self.base.sizes()[0], self.base.sizes()[1]);
        let f_size = self.channel[0].len();
        let mut probs = vec![0.0; ns * ps * f_size];
        for flat in 0..ns * ps {
            let p = self.base.probs()[flat];
            if p == 0.0 {
                continue;
            }
            let row = self.channel_row(flat);
            for (f, &pf) in row.iter().enumerate() {
                probs[flat * f_size + f] = p * pf;
            }
        }
        let mut names: Vec<String> = self.base.names().to_vec();
        names.push("F".to_string());
        JointTable::new(names, vec![ns, ps, f_size], normalize_drift(probs))
    }

    /// Joint law of (combined value, feature), grouping pattern pairs by
    /// the combine map.
    pub fn combined_table(&self) -> Result<JointTable> {
        let (ns, ps) = (self.base.sizes()[0], self.base.sizes()[1]);
        let f_size = self.channel[0].len();
        let xc = self.combined_values.len();
        let mut probs = vec![0.0; xc * f_size];
        for flat in 0..ns * ps {
            let p = self.base.probs()[flat];
            if p == 0.0 {
                continue;
            }
            let xi = self
                .combined_values
                .binary_search(&self.combine[flat])
                .expect("value present by construction");
            let row = self.channel_row(flat);
            for (f, &pf) in row.iter().enumerate() {
                probs[xi * f_size + f] += p * pf;
            }
        }
        JointTable::new(
            vec!["Xprime".to_string(), "F".to_string()],
            vec![xc, f_size],
            normalize_drift(probs),
        )
    }

    fn channel_row(&self, flat: usize) -> &[f64] {
        let xi = self
            .combined_values
            .binary_search(&self.combine[flat])
            .expect("value present by construction");
        &self.channel[xi]
    }
}

/// Rounds accumulated products back onto the unit-mass constraint by
/// nudging the largest cell; the shift is at the 1e-16 level and keeps
/// the constructor gate honest.
fn normalize_drift(mut probs: Vec<f64>) -> Vec<f64> {
    let mass: f64 = probs.iter().sum();
    let drift = 1.0 - mass;
    if drift != 0.0 {
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        probs[argmax] += drift;
    }
    probs
}

/// Residuals and reported values for the decomposition theorems on one
/// system.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TheoremReport {
    /// |I(X';F) - [I(nat;F) + I(pert;F) - H(F|X') + H(F|nat,pert) - I(nat;pert;F)]|.
    pub decomposition_residual: f64,
    /// |H(F|X') - H(F|nat,pert)|; zero when the combine map loses nothing.
    pub pattern_sufficiency_residual: f64,
    /// I(nat;pert;F), sign preserved; reported, never asserted small.
    pub triple_mi: f64,
    /// |I(X';F) - I(nat;F) - I(pert;F)|: the gap the triple term explains.
    pub approximation_gap: f64,
}

/// Evaluates both decomposition theorems on a system by exhaustive
/// enumeration of the pattern and combined tables.
pub fn verify_theorems(sys: &RandomSystem) -> Result<TheoremReport> {
    let patterns = sys.pattern_table()?;
    let combined = sys.combined_table()?;
    let nat = patterns.names()[0].clone();
    let pert = patterns.names()[1].clone();

    let i_comb_f = combined.measure(&Measure::Mi("Xprime".into(), "F".into()))?;
    let h_f_given_comb = combined.measure(&Measure::CondEntropy(
        vec!["F".into()],
        vec!["Xprime".into()],
    ))?;
    let i_nat_f = patterns.measure(&Measure::Mi(nat.clone(), "F".into()))?;
    let i_pert_f = patterns.measure(&Measure::Mi(pert.clone(), "F".into()))?;
    let h_f_given_patterns = patterns.measure(&Measure::CondEntropy(
        vec!["F".into()],
        vec![nat.clone(), pert.clone()],
    ))?;
    let triple = patterns.measure(&Measure::TripleMi(nat, pert, "F".into()))?;

    let five_terms = i_nat_f + i_pert_f - h_f_given_comb + h_f_given_patterns - triple;
    Ok(TheoremReport {
        decomposition_residual: (i_comb_f - five_terms).abs(),
        pattern_sufficiency_residual: (h_f_given_comb - h_f_given_patterns).abs(),
        triple_mi: triple,
        approximation_gap: (i_comb_f - i_nat_f - i_pert_f).abs(),
    })
}
