//! Synthetic character-level corpora with rule-checkable labels.
//!
//! Three base domains exercise genuinely different circuitry: running
//! arithmetic chains (digit manipulation), positional string operations
//! (reverse, rotate, duplicate), and a fixed substitution cipher. A fourth
//! mixed domain interleaves segments from all three. Every generated record
//! can be re-verified by the rule oracles in this module, and the tests hold
//! generation to 100% label accuracy.
//!
//! Corpus files are one record per line with tab-separated `key=value`
//! fields; values run to the tab or end of line, and the alphabet contains
//! neither tabs nor newlines, so no escaping is needed.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::rng::{self, Rng};
use crate::{Error, Result};

// ── alphabet ───────────────────────────────────────────────────────────

pub const VOCAB: usize = 64;
/// Sequence-start marker (unused by the corpora themselves).
pub const BOS: usize = 0;
/// Sequence-end marker.
pub const EOS: usize = 1;
/// Padding.
pub const PAD: usize = 2;
/// Prompt/response separator in assembled training sequences.
pub const SEP: usize = 3;

pub const ALPHABET: [char; VOCAB] = [
    '^', '$', '_', '|', //
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z', //
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', //
    ' ', //
    '+', '-', '*', '/', '=', ';', ':', '.', ',', '(', ')', '>', '<', '?', '!', '\'', '"', '#',
    '%', '&', '[', ']', '@',
];

pub fn char_to_id(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c)
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(pos, ch)| char_to_id(ch).ok_or(Error::OutsideAlphabet { ch, pos }))
        .collect()
}

pub fn decode(tokens: &[usize]) -> Result<String> {
    tokens
        .iter()
        .map(|&id| {
            ALPHABET
                .get(id)
                .copied()
                .ok_or(Error::TokenOutOfRange { id, vocab: VOCAB })
        })
        .collect()
}

// ── domains ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Domain {
    Arith,
    Strops,
    Cipher,
    Mixed,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Arith, Domain::Strops, Domain::Cipher, Domain::Mixed];
    /// The three base domains used for instruction data and analysis.
    pub const BASE: [Domain; 3] = [Domain::Arith, Domain::Strops, Domain::Cipher];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Arith => "arith",
            Domain::Strops => "strops",
            Domain::Cipher => "cipher",
            Domain::Mixed => "mixed",
        }
    }

    pub fn from_name(name: &str) -> Result<Domain> {
        match name {
            "arith" => Ok(Domain::Arith),
            "strops" => Ok(Domain::Strops),
            "cipher" => Ok(Domain::Cipher),
            "mixed" => Ok(Domain::Mixed),
            other => Err(Error::Data(format!("unknown domain {:?}", other))),
        }
    }
}

/// Domain tag word used in tagged prompts.
pub fn task_tag(d: Domain) -> &'static str {
    match d {
        Domain::Arith => "numbers",
        Domain::Strops => "strings",
        Domain::Cipher => "cipher",
        Domain::Mixed => "mixed",
    }
}

/// The standalone prompt that names a task domain; tagged training prompts
/// start with exactly this text, so a causal encoder has seen it verbatim.
pub fn task_prompt(d: Domain) -> String {
    format!("task {}", task_tag(d))
}

// ── rule oracles ───────────────────────────────────────────────────────

/// Evaluate `a+b` or `a-b` over nonnegative integers.
pub fn arith_eval(expr: &str) -> Option<i64> {
    if expr.len() < 3 {
        return None;
    }
    let opi = expr[1..].find(['+', '-'])? + 1; // skip a leading sign position
    let (a, rest) = expr.split_at(opi);
    let op = rest.as_bytes()[0] as char;
    let b = &rest[1..];
    let a: i64 = a.parse().ok()?;
    let b: i64 = b.parse().ok()?;
    match op {
        '+' => Some(a + b),
        '-' => Some(a - b),
        _ => None,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Strop {
    Reverse,
    Rotate,
    Duplicate,
}

impl Strop {
    pub const ALL: [Strop; 3] = [Strop::Reverse, Strop::Rotate, Strop::Duplicate];

    /// Short name used inside pretraining documents.
    pub fn short(self) -> &'static str {
        match self {
            Strop::Reverse => "rev",
            Strop::Rotate => "rot",
            Strop::Duplicate => "dup",
        }
    }

    /// Full name used as an instruction word.
    pub fn word(self) -> &'static str {
        match self {
            Strop::Reverse => "reverse",
            Strop::Rotate => "rotate",
            Strop::Duplicate => "duplicate",
        }
    }

    pub fn apply(self, w: &str) -> String {
        match self {
            Strop::Reverse => w.chars().rev().collect(),
            Strop::Rotate => {
                // left rotation by one: dog -> ogd
                let mut cs: Vec<char> = w.chars().collect();
                if !cs.is_empty() {
                    cs.rotate_left(1);
                }
                cs.into_iter().collect()
            }
            Strop::Duplicate => format!("{w}{w}"),
        }
    }
}

/// Fixed letter substitution used by the cipher domain.
fn cipher_map() -> &'static ([u8; 26], [u8; 26]) {
    static MAPS: OnceLock<([u8; 26], [u8; 26])> = OnceLock::new();
    MAPS.get_or_init(|| {
        let mut rng = Rng::new(0xC1F3);
        let mut fwd: Vec<u8> = (0..26).collect();
        rng.shuffle(&mut fwd);
        let mut f = [0u8; 26];
        let mut inv = [0u8; 26];
        for (i, &m) in fwd.iter().enumerate() {
            f[i] = m;
            inv[m as usize] = i as u8;
        }
        (f, inv)
    })
}

pub fn cipher_encode(w: &str) -> String {
    let (f, _) = cipher_map();
    w.chars()
        .map(|c| (b'a' + f[(c as u8 - b'a') as usize]) as char)
        .collect()
}

pub fn cipher_decode(w: &str) -> String {
    let (_, inv) = cipher_map();
    w.chars()
        .map(|c| (b'a' + inv[(c as u8 - b'a') as usize]) as char)
        .collect()
}

// ── segment generators ─────────────────────────────────────────────────

fn uniform_word(rng: &mut Rng, len: usize) -> String {
    (0..len)
        .map(|_| (b'a' + rng.below(26) as u8) as char)
        .collect()
}

/// Cipher-domain plaintext letters are skewed three-to-one toward a..m so
/// the domain's unigram profile separates from the uniform string domain.
fn skewed_word(rng: &mut Rng, len: usize) -> String {
    (0..len)
        .map(|_| {
            let r = rng.below(52);
            let idx = if r < 39 { r / 3 } else { 13 + (r - 39) };
            (b'a' + idx as u8) as char
        })
        .collect()
}

fn word_len(rng: &mut Rng) -> usize {
    rng.range(2, 5) as usize
}

/// One arithmetic chain step from the running value; returns the segment
/// and the new running value.
fn arith_segment(rng: &mut Rng, v: i64) -> (String, i64) {
    let add = if v <= 0 {
        true
    } else if v >= 900 {
        false
    } else {
        rng.below(2) == 0
    };
    let (op, b) = if add {
        ('+', rng.range(1, 99) as i64)
    } else {
        ('-', rng.range(1, 99.min(v as usize)) as i64)
    };
    let c = if op == '+' { v + b } else { v - b };
    (format!("{v}{op}{b}={c}; "), c)
}

fn strops_segment(rng: &mut Rng) -> String {
    let op = Strop::ALL[rng.below(3)];
    let n = word_len(rng);
    let w = uniform_word(rng, n);
    format!("{}({})={}; ", op.short(), w, op.apply(&w))
}

fn cipher_segment(rng: &mut Rng) -> String {
    let n = word_len(rng);
    let w = skewed_word(rng, n);
    if rng.below(2) == 0 {
        format!("enc({})={}; ", w, cipher_encode(&w))
    } else {
        format!("dec({})={}; ", cipher_encode(&w), w)
    }
}

// ── pretraining documents ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct CptDoc {
    pub text: String,
    pub domain: Domain,
}

pub const DOC_MIN_CHARS: usize = 96;
pub const DOC_MAX_CHARS: usize = 255;

/// Generate one document. Lengths land in [96, 200].
pub fn gen_doc(domain: Domain, rng: &mut Rng) -> CptDoc {
    let target = rng.range(DOC_MIN_CHARS, 177);
    let mut text = String::new();
    let mut v: i64 = rng.range(1, 99) as i64;
    while text.len() < target {
        let seg = match domain {
            Domain::Arith => {
                let (seg, nv) = arith_segment(rng, v);
                v = nv;
                seg
            }
            Domain::Strops => strops_segment(rng),
            Domain::Cipher => cipher_segment(rng),
            Domain::Mixed => match rng.below(3) {
                0 => {
                    let start = rng.range(1, 99) as i64;
                    arith_segment(rng, start).0
                }
                1 => strops_segment(rng),
                _ => cipher_segment(rng),
            },
        };
        text.push_str(&seg);
    }
    debug_assert!(text.len() >= DOC_MIN_CHARS && text.len() <= DOC_MAX_CHARS);
    CptDoc { text, domain }
}

/// Deterministic corpus: document i gets domain i % 4 and its own stream
/// derived from (seed, i), so any record can be regenerated in isolation.
pub fn gen_cpt_corpus(n_docs: usize, seed: u64) -> Vec<CptDoc> {
    let base = rng::derive(seed, rng::DATA);
    (0..n_docs)
        .map(|i| {
            let mut r = Rng::new(rng::derive(base, i as u64));
            gen_doc(Domain::ALL[i % 4], &mut r)
        })
        .collect()
}

/// Check every equation in a document; pure arithmetic documents must also
/// chain (each left operand equals the previous result).
pub fn verify_cpt_doc(doc: &CptDoc) -> bool {
    let mut prev: Option<i64> = None;
    for seg in doc.text.split_terminator("; ") {
        let Some((lhs, rhs)) = seg.split_once('=') else {
            return false;
        };
        let ok = if let Some(inner) = lhs.strip_prefix("rev(").and_then(|s| s.strip_suffix(')')) {
            Strop::Reverse.apply(inner) == rhs
        } else if let Some(inner) = lhs.strip_prefix("rot(").and_then(|s| s.strip_suffix(')')) {
            Strop::Rotate.apply(inner) == rhs
        } else if let Some(inner) = lhs.strip_prefix("dup(").and_then(|s| s.strip_suffix(')')) {
            Strop::Duplicate.apply(inner) == rhs
        } else if let Some(inner) = lhs.strip_prefix("enc(").and_then(|s| s.strip_suffix(')')) {
            cipher_encode(inner) == rhs
        } else if let Some(inner) = lhs.strip_prefix("dec(").and_then(|s| s.strip_suffix(')')) {
            cipher_decode(inner) == rhs
        } else {
            let (Some(c), Ok(r)) = (arith_eval(lhs), rhs.parse::<i64>()) else {
                return false;
            };
            if doc.domain == Domain::Arith {
                let a: i64 = lhs[..lhs[1..].find(['+', '-']).map(|i| i + 1).unwrap_or(0)]
                    .parse()
                    .unwrap_or(i64::MIN);
                if let Some(p) = prev {
                    if a != p {
                        return false;
                    }
                }
                prev = Some(r);
            }
            c == r && r >= 0
        };
        if !ok {
            return false;
        }
    }
    !doc.text.is_empty()
}

// ── instruction pairs ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct SftPair {
    pub prompt: String,
    pub response: String,
    pub domain: Domain,
}

/// Instruction word for a freshly sampled base-domain task.
fn pick_instr(domain: Domain, rng: &mut Rng) -> &'static str {
    match domain {
        Domain::Arith => "solve",
        Domain::Strops => Strop::ALL[rng.below(3) as usize].word(),
        Domain::Cipher => {
            if rng.below(2) == 0 {
                "encode"
            } else {
                "decode"
            }
        }
        Domain::Mixed => unreachable!("no instruction data for the mixed domain"),
    }
}

/// A query and its exact answer under a fixed instruction word.
fn query_for(instr: &str, rng: &mut Rng) -> (String, String) {
    match instr {
        "solve" => {
            let a = rng.range(1, 99) as i64;
            let (op, b) = if rng.below(2) == 0 {
                ('+', rng.range(1, 99) as i64)
            } else {
                ('-', rng.range(1, a as usize) as i64)
            };
            let c = if op == '+' { a + b } else { a - b };
            (format!("{a}{op}{b}"), c.to_string())
        }
        "reverse" => {
            let n = word_len(rng);
            let w = uniform_word(rng, n);
            (w.clone(), Strop::Reverse.apply(&w))
        }
        "rotate" => {
            let n = word_len(rng);
            let w = uniform_word(rng, n);
            (w.clone(), Strop::Rotate.apply(&w))
        }
        "duplicate" => {
            let n = word_len(rng);
            let w = uniform_word(rng, n);
            (w.clone(), Strop::Duplicate.apply(&w))
        }
        "encode" => {
            let n = word_len(rng);
            let w = skewed_word(rng, n);
            let e = cipher_encode(&w);
            (w, e)
        }
        "decode" => {
            let n = word_len(rng);
            let w = skewed_word(rng, n);
            (cipher_encode(&w), w)
        }
        other => unreachable!("unknown instruction {other}"),
    }
}

/// Generate one prompt/response pair in one of three prompt styles:
/// 0 = bare instruction, 1 = two-shot, 2 = tagged instruction.
pub fn gen_pair(domain: Domain, template: usize, rng: &mut Rng) -> SftPair {
    let instr = pick_instr(domain, rng);
    let (query, answer) = query_for(instr, rng);
    let prompt = match template {
        0 => format!("{instr}: {query}"),
        1 => {
            // shots share the instruction so the pattern is unambiguous
            let (q1, a1) = query_for(instr, rng);
            let (q2, a2) = query_for(instr, rng);
            format!("{instr}: {q1}={a1}; {q2}={a2}; {query}")
        }
        _ => format!("{} | {instr}: {query}", task_prompt(domain)),
    };
    SftPair {
        prompt,
        response: answer,
        domain,
    }
}

/// Deterministic instruction corpus cycling domains fastest, then templates.
pub fn gen_sft_corpus(n_pairs: usize, seed: u64) -> Vec<SftPair> {
    let base = rng::derive(seed, rng::DATA);
    (0..n_pairs)
        .map(|i| {
            let mut r = Rng::new(rng::derive(base, 0x5F7 ^ (i as u64)));
            gen_pair(Domain::BASE[i % 3], (i / 3) % 3, &mut r)
        })
        .collect()
}

/// Recompute the exact answer for a prompt and compare to the response.
pub fn verify_sft_pair(pair: &SftPair) -> bool {
    let mut body = pair.prompt.as_str();
    if let Some(rest) = body.strip_prefix("task ") {
        let Some((tag, rest)) = rest.split_once(" | ") else {
            return false;
        };
        if tag != task_tag(pair.domain) {
            return false;
        }
        body = rest;
    }
    let Some((instr, args)) = body.split_once(": ") else {
        return false;
    };
    // in the few-shot style the query is the final segment
    let query = args.rsplit("; ").next().unwrap_or(args);
    let expected = match instr {
        "solve" => arith_eval(query).map(|v| v.to_string()),
        "reverse" => Some(Strop::Reverse.apply(query)),
        "rotate" => Some(Strop::Rotate.apply(query)),
        "duplicate" => Some(Strop::Duplicate.apply(query)),
        "encode" => Some(cipher_encode(query)),
        "decode" => Some(cipher_decode(query)),
        _ => None,
    };
    expected.as_deref() == Some(pair.response.as_str())
}

// ── corpus files ───────────────────────────────────────────────────────

fn field<'a>(parts: &[&'a str], key: &str, lineno: usize) -> Result<&'a str> {
    for p in parts {
        if let Some((k, v)) = p.split_once('=') {
            if k == key {
                return Ok(v);
            }
        }
    }
    Err(Error::Data(format!("line {}: missing field {}", lineno + 1, key)))
}

pub fn write_cpt_corpus(path: &Path, docs: &[CptDoc]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&format!("text={}\tdomain={}\n", d.text, d.domain.name()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cpt_corpus(path: &Path) -> Result<Vec<CptDoc>> {
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        docs.push(CptDoc {
            text: field(&parts, "text", lineno)?.to_string(),
            domain: Domain::from_name(field(&parts, "domain", lineno)?)?,
        });
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", path.display())));
    }
    Ok(docs)
}

pub fn write_sft_corpus(path: &Path, pairs: &[SftPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "prompt={}\tresponse={}\tdomain={}\n",
            p.prompt,
            p.response,
            p.domain.name()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sft_corpus(path: &Path) -> Result<Vec<SftPair>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let pair = SftPair {
            prompt: field(&parts, "prompt", lineno)?.to_string(),
            response: field(&parts, "response", lineno)?.to_string(),
            domain: Domain::from_name(field(&parts, "domain", lineno)?)?,
        };
        if pair.prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if pair.response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", path.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_is_consistent() {
        assert_eq!(ALPHABET.len(), VOCAB);
        let mut seen = std::collections::HashSet::new();
        for &c in &ALPHABET {
            assert!(seen.insert(c), "duplicate char {:?}", c);
        }
        assert_eq!(ALPHABET[BOS], '^');
        assert_eq!(ALPHABET[EOS], '$');
        assert_eq!(ALPHABET[PAD], '_');
        assert_eq!(ALPHABET[SEP], '|');
        assert_eq!(char_to_id('a'), Some(4));
        assert_eq!(char_to_id('z'), Some(29));
        assert_eq!(char_to_id('0'), Some(30));
        assert_eq!(char_to_id('9'), Some(39));
        assert_eq!(char_to_id(' '), Some(40));
        assert_eq!(char_to_id('~'), None);
    }

    #[test]
    fn encode_decode_round_trip() {
        let text = "rev(abc)=cba; 17+25=42; task numbers | solve: 1+1";
        let ids = encode(text).unwrap();
        assert_eq!(decode(&ids).unwrap(), text);
        assert!(matches!(
            encode("héllo"),
            Err(Error::OutsideAlphabet { ch: 'é', pos: 1 })
        ));
        assert!(decode(&[64]).is_err());
    }

    #[test]
    fn oracles_compute_known_values() {
        assert_eq!(arith_eval("17+25"), Some(42));
        assert_eq!(arith_eval("17-25"), Some(-8));
        assert_eq!(arith_eval("taco"), None);
        assert_eq!(Strop::Reverse.apply("ab"), "ba");
        assert_eq!(Strop::Rotate.apply("dog"), "ogd");
        assert_eq!(Strop::Duplicate.apply("xy"), "xyxy");
    }

    #[test]
    fn cipher_is_a_bijection_and_inverts() {
        let all: String = (b'a'..=b'z').map(|b| b as char).collect();
        let enc = cipher_encode(&all);
        let mut sorted: Vec<char> = enc.chars().collect();
        sorted.sort_unstable();
        let back: String = sorted.into_iter().collect();
        assert_eq!(back, all); // permutation
        assert_eq!(cipher_decode(&enc), all);
        assert_ne!(enc, all); // actually scrambles
        let fixed = all.chars().zip(enc.chars()).filter(|(a, b)| a == b).count();
        assert!(fixed <= 4, "{} fixed points", fixed);
    }

    #[test]
    fn documents_verify_and_fit_length_bounds() {
        let docs = gen_cpt_corpus(200, 1234);
        assert_eq!(docs.len(), 200);
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(d.domain, Domain::ALL[i % 4]);
            assert!(d.text.len() >= DOC_MIN_CHARS, "doc {} too short", i);
            assert!(d.text.len() <= DOC_MAX_CHARS, "doc {} too long", i);
            encode(&d.text).unwrap_or_else(|e| panic!("doc {}: {}", i, e));
            assert!(verify_cpt_doc(d), "doc {} fails its oracle: {}", i, d.text);
        }
    }

    #[test]
    fn corrupted_documents_fail_verification() {
        let mut rng = Rng::new(7);
        let mut doc = gen_doc(Domain::Arith, &mut rng);
        doc.text = doc.text.replacen('=', "=9", 1);
        assert!(!verify_cpt_doc(&doc));

        let wrong = |text: &str, domain| !verify_cpt_doc(&CptDoc { text: text.to_string(), domain });
        assert!(wrong("rev(ab)=ab; ", Domain::Strops));
        assert!(wrong("rot(dog)=gdo; ", Domain::Strops));
        assert!(wrong("dup(xy)=xy; ", Domain::Strops));
        assert!(wrong("enc(ab)=ab; ", Domain::Cipher) || cipher_encode("ab") == "ab");
        // broken chain: equations hold but the left operand does not carry
        assert!(wrong("1+2=3; 9+1=10; ", Domain::Arith));
        assert!(!wrong("1+2=3; 3+1=4; ", Domain::Arith));
        assert!(!wrong("rev(ab)=ba; ", Domain::Strops));
    }

    #[test]
    fn arith_documents_chain() {
        let mut rng = Rng::new(8);
        let doc = gen_doc(Domain::Arith, &mut rng);
        let results: Vec<&str> = doc
            .text
            .split_terminator("; ")
            .map(|s| s.split_once('=').unwrap().1)
            .collect();
        let starts: Vec<&str> = doc
            .text
            .split_terminator("; ")
            .map(|s| {
                let lhs = s.split_once('=').unwrap().0;
                let op = lhs[1..].find(['+', '-']).unwrap() + 1;
                &lhs[..op]
            })
            .collect();
        for i in 1..results.len() {
            assert_eq!(starts[i], results[i - 1]);
        }
    }

    #[test]
    fn pairs_verify_and_cycle_domains_and_templates() {
        let pairs = gen_sft_corpus(180, 99);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(p.domain, Domain::BASE[i % 3]);
            encode(&p.prompt).unwrap();
            encode(&p.response).unwrap();
            assert!(verify_sft_pair(p), "pair {} fails: {:?}", i, p);
            match (i / 3) % 3 {
                0 => assert!(!p.prompt.contains(';') && !p.prompt.starts_with("task ")),
                1 => assert!(p.prompt.contains("; ")),
                _ => assert!(p.prompt.starts_with("task ")),
            }
        }
        // wrong answers are caught
        let mut bad = pairs[0].clone();
        bad.response.push('7');
        assert!(!verify_sft_pair(&bad));
        // tag must match the claimed domain
        let tagged = pairs.iter().find(|p| p.prompt.starts_with("task ")).unwrap();
        let mut relabeled = tagged.clone();
        relabeled.domain = match relabeled.domain {
            Domain::Arith => Domain::Strops,
            _ => Domain::Arith,
        };
        assert!(!verify_sft_pair(&relabeled));
    }

    #[test]
    fn tagged_prompts_start_with_the_task_prompt() {
        for d in Domain::BASE {
            let mut rng = Rng::new(55);
            let pair = gen_pair(d, 2, &mut rng);
            assert!(pair.prompt.starts_with(&format!("{} | ", task_prompt(d))));
        }
        assert_eq!(task_prompt(Domain::Arith), "task numbers");
        assert_eq!(task_prompt(Domain::Strops), "task strings");
        assert_eq!(task_prompt(Domain::Cipher), "task cipher");
    }

    #[test]
    fn corpora_regenerate_identically() {
        assert_eq!(gen_cpt_corpus(40, 5), gen_cpt_corpus(40, 5));
        assert_ne!(gen_cpt_corpus(40, 5), gen_cpt_corpus(40, 6));
        assert_eq!(gen_sft_corpus(40, 5), gen_sft_corpus(40, 5));
        assert_ne!(gen_sft_corpus(40, 5), gen_sft_corpus(40, 6));
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cpt_path = dir.path().join("cpt.tsv");
        let sft_path = dir.path().join("sft.tsv");
        let docs = gen_cpt_corpus(12, 3);
        let pairs = gen_sft_corpus(12, 3);
        write_cpt_corpus(&cpt_path, &docs).unwrap();
        write_sft_corpus(&sft_path, &pairs).unwrap();
        assert_eq!(read_cpt_corpus(&cpt_path).unwrap(), docs);
        assert_eq!(read_sft_corpus(&sft_path).unwrap(), pairs);

        std::fs::write(&cpt_path, "text=abc\n").unwrap(); // missing domain
        assert!(read_cpt_corpus(&cpt_path).is_err());
        std::fs::write(&cpt_path, "").unwrap();
        assert!(read_cpt_corpus(&cpt_path).is_err());
    }

    // The domains must be distinguishable from character statistics alone,
    // otherwise a prompt cannot carry a domain signal.
    #[test]
    fn base_domains_are_separable_by_unigrams() {
        let docs = gen_cpt_corpus(400, 77);
        let unigram = |dom: Domain| -> Vec<f64> {
            let mut counts = vec![0.0; VOCAB];
            let mut total = 0.0;
            for d in docs.iter().filter(|d| d.domain == dom) {
                for id in encode(&d.text).unwrap() {
                    counts[id] += 1.0;
                    total += 1.0;
                }
            }
            counts.iter().map(|c| c / total).collect()
        };
        let tv = |p: &[f64], q: &[f64]| -> f64 {
            0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
        };
        let a = unigram(Domain::Arith);
        let s = unigram(Domain::Strops);
        let c = unigram(Domain::Cipher);
        for (x, y, name) in [(&a, &s, "arith/strops"), (&a, &c, "arith/cipher"), (&s, &c, "strops/cipher")] {
            let d = tv(x, y);
            assert!(d > 0.1, "{} unigram distance {} too small", name, d);
        }
    }
}
