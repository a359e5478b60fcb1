//! Line-oriented text formats for MDPs, MRPs, policy classes, certificates,
//! block-free matrices and lock decoders.
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written in
//! Rust's shortest round-trip form, so write-then-read is lossless.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lowerbound::{BlockFreeMatrix, Decoder};
use crate::mdp::{LayeredMdp, MdpBuilder, RewardDist};
use crate::mrp::{Mrp, MrpFlavor};
use crate::policy::{ClassTag, Policy, PolicyClass};
use crate::sunflower::SunflowerCert;
use crate::universe::{StateId, Universe};

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Lines { lines, pos: 0 }
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let l = self.peek();
        self.pos += l.is_some() as usize;
        l
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let last = self.lines.last().map_or(0, |l| l.0);
        self.next().ok_or_else(|| Error::Parse { line: last, msg: format!("unexpected end of input, expected {what}") })
    }

    fn done(&self) -> bool {
        self.pos >= self.lines.len()
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn num<T: FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| perr(line, format!("cannot parse `{tok}`")))
}

fn nums<T: FromStr>(toks: &str, line: usize) -> Result<Vec<T>> {
    toks.split_whitespace().map(|t| num(t, line)).collect()
}

/// Splits `lhs : rhs`; returns the lhs tokens and the rhs text.
fn split_colon(text: &str, line: usize) -> Result<(Vec<&str>, &str)> {
    let (l, r) = text.split_once(':').ok_or_else(|| perr(line, "missing `:`"))?;
    Ok((l.split_whitespace().collect(), r.trim()))
}

/// Tokens after a fixed keyword, with an exact count.
fn header<'a>(text: &'a str, line: usize, keyword: &str, count: usize) -> Result<Vec<&'a str>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.first() != Some(&keyword) {
        return Err(perr(line, format!("expected `{keyword}` line")));
    }
    if toks.len() != count + 1 {
        return Err(perr(line, format!("`{keyword}` takes {count} fields")));
    }
    Ok(toks[1..].to_vec())
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_state(tok: &str, line: usize) -> Result<StateId> {
    let (h, i) = tok.split_once('.').ok_or_else(|| perr(line, format!("state `{tok}` is not `layer.index`")))?;
    Ok(StateId::new(num(h, line)?, num(i, line)?))
}

fn wrap<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Invalid(msg) => perr(line, msg),
        other => other,
    })
}

// ---- MDP ----

pub fn write_mdp(mdp: &LayeredMdp) -> String {
    let u = mdp.universe();
    let mut out = String::new();
    writeln!(out, "mdp {} {}", u.horizon(), u.actions()).unwrap();
    for h in 1..=u.horizon() {
        writeln!(out, "layer {h} {}", u.layer_size(h)).unwrap();
    }
    writeln!(out, "init : {}", join(mdp.init())).unwrap();
    for s in u.states() {
        for a in 0..u.actions() {
            if s.layer < u.horizon() {
                writeln!(out, "t {} {} {a} : {}", s.layer, s.index, join(mdp.transition(s, a))).unwrap();
            }
        }
    }
    for s in u.states() {
        for a in 0..u.actions() {
            let r = match mdp.reward(s, a) {
                RewardDist::Point(v) => format!("point {v}"),
                RewardDist::Bernoulli(p) => format!("bernoulli {p}"),
            };
            writeln!(out, "r {} {} {a} : {r}", s.layer, s.index).unwrap();
        }
    }
    out
}

/// Every transition row is required; missing reward rows default to `point 0`.
pub fn read_mdp(text: &str) -> Result<LayeredMdp> {
    let mut lines = Lines::new(text);
    let (ln, head) = lines.expect("`mdp H A`")?;
    let f = header(head, ln, "mdp", 2)?;
    let (h, a): (usize, usize) = (num(f[0], ln)?, num(f[1], ln)?);
    let mut sizes = Vec::with_capacity(h);
    for want in 1..=h {
        let (ln, l) = lines.expect("`layer h n`")?;
        let f = header(l, ln, "layer", 2)?;
        if num::<usize>(f[0], ln)? != want {
            return Err(perr(ln, format!("expected layer {want}")));
        }
        sizes.push(num(f[1], ln)?);
    }
    let u = wrap(ln, Universe::new(sizes, a))?;
    let mut b = MdpBuilder::new(u.clone());
    let mut seen_t = vec![false; u.num_states() * a];
    let mut seen_init = false;
    while let Some((ln, l)) = lines.next() {
        let (lhs, rhs) = split_colon(l, ln)?;
        let state_at = |lhs: &[&str]| -> Result<(StateId, usize)> {
            if lhs.len() != 4 {
                return Err(perr(ln, "expected `h s a` before `:`"));
            }
            let s = StateId::new(num(lhs[1], ln)?, num(lhs[2], ln)?);
            let act: usize = num(lhs[3], ln)?;
            if !u.contains(s) || act >= a {
                return Err(perr(ln, format!("({s}, {act}) outside the declared shape")));
            }
            Ok((s, act))
        };
        match lhs.first().copied() {
            Some("init") if lhs.len() == 1 => {
                b.init(nums(rhs, ln)?);
                seen_init = true;
            }
            Some("t") => {
                let (s, act) = state_at(&lhs)?;
                if s.layer == h {
                    return Err(perr(ln, "last-layer states have no transitions"));
                }
                b.transition(s, act, nums(rhs, ln)?);
                seen_t[u.flat(s) * a + act] = true;
            }
            Some("r") => {
                let (s, act) = state_at(&lhs)?;
                let toks: Vec<&str> = rhs.split_whitespace().collect();
                let r = match toks.as_slice() {
                    ["point", v] => RewardDist::Point(num(v, ln)?),
                    ["bernoulli", v] => RewardDist::Bernoulli(num(v, ln)?),
                    _ => return Err(perr(ln, "reward must be `point v` or `bernoulli p`")),
                };
                b.reward(s, act, r);
            }
            _ => return Err(perr(ln, format!("unknown row `{l}`"))),
        }
    }
    if !seen_init {
        return Err(perr(0, "missing `init` row"));
    }
    for s in u.states().filter(|s| s.layer < h) {
        for act in 0..a {
            if !seen_t[u.flat(s) * a + act] {
                return Err(perr(0, format!("missing transition row for ({s}, {act})")));
            }
        }
    }
    wrap(0, b.build())
}

// ---- MRP ----

pub fn write_mrp(mrp: &Mrp) -> String {
    let mut out = String::new();
    match mrp.flavor() {
        MrpFlavor::Exact => writeln!(out, "mrp {}", mrp.horizon()).unwrap(),
        MrpFlavor::Empirical { k } => writeln!(out, "mrp {} empirical {k}", mrp.horizon()).unwrap(),
    }
    let bot = StateId::bottom(mrp.horizon());
    for s in mrp.nodes() {
        writeln!(out, "node {} {}", s.layer, s.index).unwrap();
    }
    for &s in mrp.nodes() {
        if s == bot {
            continue;
        }
        for (t, p, r) in mrp.edges_from(s) {
            writeln!(out, "e {} {} {} {} : {p} {r}", s.layer, s.index, t.layer, t.index).unwrap();
        }
    }
    out
}

pub fn read_mrp(text: &str) -> Result<Mrp> {
    let mut lines = Lines::new(text);
    let (ln, head) = lines.expect("`mrp H`")?;
    let toks: Vec<&str> = head.split_whitespace().collect();
    let (h, flavor) = match toks.as_slice() {
        ["mrp", h] => (num(h, ln)?, MrpFlavor::Exact),
        ["mrp", h, "empirical", k] => (num(h, ln)?, MrpFlavor::Empirical { k: num(k, ln)? }),
        _ => return Err(perr(ln, "expected `mrp H` or `mrp H empirical K`")),
    };
    let mut b = Mrp::builder(h, flavor);
    while let Some((ln, l)) = lines.next() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            Some("node") if toks.len() == 3 => {
                b.node(StateId::new(num(toks[1], ln)?, num(toks[2], ln)?));
            }
            Some("e") => {
                let (lhs, rhs) = split_colon(l, ln)?;
                if lhs.len() != 5 {
                    return Err(perr(ln, "expected `e h s h' s' : p r`"));
                }
                let v: Vec<f64> = nums(rhs, ln)?;
                if v.len() != 2 {
                    return Err(perr(ln, "edge needs `p r`"));
                }
                let from = StateId::new(num(lhs[1], ln)?, num(lhs[2], ln)?);
                let to = StateId::new(num(lhs[3], ln)?, num(lhs[4], ln)?);
                b.edge(from, to, v[0], v[1]);
            }
            _ => return Err(perr(ln, format!("unknown row `{l}`"))),
        }
    }
    wrap(0, b.build())
}

// ---- policy classes ----

fn tag_from_str(s: &str, line: usize) -> Result<ClassTag> {
    let toks: Vec<&str> = s.split_whitespace().collect();
    Ok(match toks.as_slice() {
        ["singleton"] => ClassTag::Singleton,
        ["lton", l] => ClassTag::Lton(num(l, line)?),
        ["one_active"] => ClassTag::OneActive,
        ["all_active"] => ClassTag::AllActive,
        ["tabular"] => ClassTag::Tabular,
        ["cb_chain"] => ClassTag::CbChain,
        ["threshold"] => ClassTag::Threshold,
        ["explicit"] => ClassTag::Explicit,
        ["pi_ell"] => ClassTag::PiEll,
        _ => return Err(perr(line, format!("unknown tag `{s}`"))),
    })
}

/// Structured classes are written as header + tag only.
pub fn write_pclass(class: &PolicyClass) -> String {
    let u = class.universe();
    let mut out = String::new();
    match u.uniform_width() {
        Some(k) => writeln!(out, "pclass {k} {} {}", u.horizon(), u.actions()).unwrap(),
        None => {
            writeln!(out, "pclass 0 {} {}", u.horizon(), u.actions()).unwrap();
            writeln!(out, "layers {}", join(u.layer_sizes())).unwrap();
        }
    }
    writeln!(out, "tag {}", class.tag()).unwrap();
    if !class.tag().is_structured() {
        for (m, p) in class.members().iter().enumerate() {
            writeln!(out, "{m} : {}", join(p.flat_actions())).unwrap();
        }
    }
    out
}

fn read_pclass_from(lines: &mut Lines<'_>, stop_at_end: bool) -> Result<PolicyClass> {
    let (ln, head) = lines.expect("`pclass K H A`")?;
    let f = header(head, ln, "pclass", 3)?;
    let (k, h, a): (usize, usize, usize) = (num(f[0], ln)?, num(f[1], ln)?, num(f[2], ln)?);
    let u = if k == 0 {
        let (ln, l) = lines.expect("`layers ...`")?;
        let rest = l.strip_prefix("layers").ok_or_else(|| perr(ln, "K = 0 needs a `layers` line"))?;
        let sizes: Vec<usize> = nums(rest, ln)?;
        if sizes.len() != h {
            return Err(perr(ln, format!("expected {h} layer sizes")));
        }
        wrap(ln, Universe::new(sizes, a))?
    } else {
        wrap(ln, Universe::uniform(k, h, a))?
    };
    let (ln, l) = lines.expect("`tag ...`")?;
    let tag = tag_from_str(l.strip_prefix("tag").ok_or_else(|| perr(ln, "expected `tag` line"))?, ln)?;
    if tag.is_structured() {
        return wrap(ln, PolicyClass::from_tag(tag, &u));
    }
    let mut members = Vec::new();
    while let Some((ln, l)) = lines.peek() {
        if stop_at_end && l == "end" {
            lines.next();
            break;
        }
        lines.next();
        let (lhs, rhs) = split_colon(l, ln)?;
        if lhs.len() != 1 || num::<usize>(lhs[0], ln)? != members.len() {
            return Err(perr(ln, format!("expected member row {}", members.len())));
        }
        let acts: Vec<usize> = nums(rhs, ln)?;
        if acts.len() != u.num_states() {
            return Err(perr(ln, format!("member row needs {} actions", u.num_states())));
        }
        if let Some(x) = acts.iter().find(|&&x| x >= a) {
            return Err(perr(ln, format!("action {x} out of range")));
        }
        let mut it = acts.into_iter();
        let table = (1..=h).map(|l| (&mut it).take(u.layer_size(l)).map(|x| x as u16).collect()).collect();
        members.push(Policy::from_layers(table));
    }
    wrap(ln, PolicyClass::new(u, members, tag))
}

pub fn read_pclass(text: &str) -> Result<PolicyClass> {
    let mut lines = Lines::new(text);
    let c = read_pclass_from(&mut lines, false)?;
    if let Some((ln, _)) = lines.peek() {
        return Err(perr(ln, "trailing input"));
    }
    Ok(c)
}

/// `tag:params` spec such as `singleton:K=3,H=4` or `cb_chain:H=3,A=2`.
pub fn class_from_spec(spec: &str) -> Result<PolicyClass> {
    let (name, params) = spec.split_once(':').unwrap_or((spec, ""));
    let mut get = std::collections::BTreeMap::new();
    for kv in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::invalid(format!("bad parameter `{kv}`")))?;
        let v: usize = v.trim().parse().map_err(|_| Error::invalid(format!("bad value in `{kv}`")))?;
        get.insert(k.trim().to_ascii_uppercase(), v);
    }
    let p = |key: &str| get.get(key).copied().ok_or_else(|| Error::invalid(format!("`{name}` needs {key}=")));
    use crate::policy::*;
    match name {
        "singleton" => build_singletons(p("K")?, p("H")?),
        "lton" => build_ltons(p("K")?, p("H")?, p("L")?),
        "one_active" => build_one_active(p("K")?, p("H")?),
        "all_active" => build_all_active(p("K")?, p("H")?),
        "tabular" => build_tabular(p("K")?, p("H")?, p("A")?),
        "cb_chain" => build_cb_chain(p("H")?, p("A")?),
        "threshold" => build_threshold(p("K")?, p("H")?),
        "tree_paths" => build_tree_paths(p("H")?),
        _ => Err(Error::invalid(format!("unknown class `{name}`"))),
    }
}

// ---- certificates ----

pub fn write_cert(cert: &SunflowerCert) -> String {
    let mut out = String::new();
    writeln!(out, "cert {} {}", cert.k, cert.d).unwrap();
    writeln!(out, "core :").unwrap();
    out.push_str(&write_pclass(&cert.core));
    if !cert.core.tag().is_structured() {
        writeln!(out, "end").unwrap();
    }
    for (m, p) in cert.petals.iter().enumerate() {
        writeln!(out, "petal {m} : {}", join(p)).unwrap();
    }
    out
}

pub fn read_cert(text: &str) -> Result<SunflowerCert> {
    let mut lines = Lines::new(text);
    let (ln, head) = lines.expect("`cert K D`")?;
    let f = header(head, ln, "cert", 2)?;
    let (k, d): (usize, usize) = (num(f[0], ln)?, num(f[1], ln)?);
    let (ln, l) = lines.expect("`core :`")?;
    if l.split_whitespace().collect::<Vec<_>>() != ["core", ":"] {
        return Err(perr(ln, "expected `core :`"));
    }
    let core = read_pclass_from(&mut lines, true)?;
    let mut petals = Vec::new();
    while let Some((ln, l)) = lines.next() {
        let (lhs, rhs) = split_colon(l, ln)?;
        if lhs.len() != 2 || lhs[0] != "petal" || num::<usize>(lhs[1], ln)? != petals.len() {
            return Err(perr(ln, format!("expected `petal {} : ...`", petals.len())));
        }
        let states = rhs.split_whitespace().map(|t| parse_state(t, ln)).collect::<Result<Vec<_>>>()?;
        petals.push(states);
    }
    debug_assert!(lines.done());
    wrap(0, SunflowerCert::new(core, petals, k, d))
}

// ---- matrices and decoders ----

pub fn write_matrix(b: &BlockFreeMatrix) -> String {
    let mut out = String::new();
    writeln!(out, "matrix {} {} {} {} {}", b.n(), b.d(), b.eps, b.ell, b.k).unwrap();
    for (i, r) in b.rows.iter().enumerate() {
        writeln!(out, "{i} : {}", join(r.iter().map(|&x| x as u8))).unwrap();
    }
    out
}

pub fn read_matrix(text: &str) -> Result<BlockFreeMatrix> {
    let mut lines = Lines::new(text);
    let (ln, head) = lines.expect("`matrix N d eps ell k`")?;
    let f = header(head, ln, "matrix", 5)?;
    let (n, d): (usize, usize) = (num(f[0], ln)?, num(f[1], ln)?);
    let eps: f64 = num(f[2], ln)?;
    let (ell, k): (usize, usize) = (num(f[3], ln)?, num(f[4], ln)?);
    let mut rows = Vec::with_capacity(n);
    while let Some((ln, l)) = lines.next() {
        let (lhs, rhs) = split_colon(l, ln)?;
        if lhs.len() != 1 || num::<usize>(lhs[0], ln)? != rows.len() {
            return Err(perr(ln, format!("expected row {}", rows.len())));
        }
        let bits: Vec<u8> = nums(rhs, ln)?;
        if bits.len() != d || bits.iter().any(|&x| x > 1) {
            return Err(perr(ln, format!("row needs {d} entries in {{0, 1}}")));
        }
        rows.push(bits.into_iter().map(|x| x == 1).collect());
    }
    if rows.len() != n {
        return Err(perr(0, format!("expected {n} rows, found {}", rows.len())));
    }
    wrap(0, BlockFreeMatrix::new(rows, eps, ell, k))
}

/// `phi j : g_1 .. g_H` where `g_h` is 0 if `j[h]` is Good and 1 if its twin is.
pub fn write_decoder(dec: &Decoder) -> String {
    let mut out = String::new();
    writeln!(out, "decoder {} {}", dec.locks(), dec.horizon()).unwrap();
    for (j, row) in dec.primary_good.iter().enumerate() {
        writeln!(out, "phi {j} : {}", join(row.iter().map(|&g| (!g) as u8))).unwrap();
    }
    out
}

pub fn read_decoder(text: &str) -> Result<Decoder> {
    let mut lines = Lines::new(text);
    let (ln, head) = lines.expect("`decoder J H`")?;
    let f = header(head, ln, "decoder", 2)?;
    let (locks, h): (usize, usize) = (num(f[0], ln)?, num(f[1], ln)?);
    let mut rows = Vec::with_capacity(locks);
    while let Some((ln, l)) = lines.next() {
        let (lhs, rhs) = split_colon(l, ln)?;
        if lhs.len() != 2 || lhs[0] != "phi" || num::<usize>(lhs[1], ln)? != rows.len() {
            return Err(perr(ln, format!("expected `phi {} : ...`", rows.len())));
        }
        let g: Vec<u8> = nums(rhs, ln)?;
        if g.len() != h || g.iter().any(|&x| x > 1) {
            return Err(perr(ln, format!("decoder row needs {h} entries in {{0, 1}}")));
        }
        rows.push(g.into_iter().map(|x| x == 0).collect());
    }
    if rows.len() != locks {
        return Err(perr(0, format!("expected {locks} decoder rows, found {}", rows.len())));
    }
    wrap(0, Decoder::new(rows))
}

// ---- files ----

pub fn read_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

pub fn write_file(path: impl AsRef<Path>, text: &str) -> Result<()> {
    Ok(std::fs::write(path, text)?)
}
