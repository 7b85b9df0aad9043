//! Synthetic biased corpora, template test sets, external negative corpora,
//! JSONL ingestion/export, and data-driven lexicon extraction.
//!
//! The synthetic generators inject a controllable spurious correlation: group
//! identifier tokens (or a dialect-shifted unigram distribution) appear more
//! often in harmful-labeled examples than in normal ones. Train and validation
//! splits carry the correlation; the test split breaks it by sampling both
//! rates at their midpoint.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{CoreError, Result};
use crate::model::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Reserved,
    Neutral,
    HarmSignal,
    Identifier(usize),
    DialectMarker,
}

/// Closed vocabulary with disjoint token partitions. Ids are contiguous,
/// with 0 = PAD and 1 = UNK belonging to no partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    lexicon_count: usize,
}

impl Vocab {
    pub fn synthetic(neutral: usize, harm: usize, identifier_lexicons: &[usize], dialect: usize) -> Vocab {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut classes = vec![TokenClass::Reserved, TokenClass::Reserved];
        for i in 0..neutral {
            tokens.push(format!("n{i:03}"));
            classes.push(TokenClass::Neutral);
        }
        for i in 0..harm {
            tokens.push(format!("h{i:03}"));
            classes.push(TokenClass::HarmSignal);
        }
        for (j, count) in identifier_lexicons.iter().enumerate() {
            for i in 0..*count {
                tokens.push(format!("grp{j}_{i:02}"));
                classes.push(TokenClass::Identifier(j));
            }
        }
        for i in 0..dialect {
            tokens.push(format!("d{i:03}"));
            classes.push(TokenClass::DialectMarker);
        }
        Vocab {
            tokens,
            classes,
            lexicon_count: identifier_lexicons.len(),
        }
    }

    /// 300 neutral, 40 harm-signal, two identifier lexicons of 10, 40 dialect
    /// markers, plus the two reserved ids.
    pub fn synthetic_default() -> Vocab {
        Vocab::synthetic(300, 40, &[10, 10], 40)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn class(&self, id: u32) -> TokenClass {
        self.classes[id as usize]
    }

    pub fn lexicon_count(&self) -> usize {
        self.lexicon_count
    }

    fn ids_where(&self, pred: impl Fn(TokenClass) -> bool) -> Vec<u32> {
        (0..self.size() as u32).filter(|id| pred(self.classes[*id as usize])).collect()
    }

    pub fn neutral_ids(&self) -> Vec<u32> {
        self.ids_where(|c| c == TokenClass::Neutral)
    }

    pub fn harm_ids(&self) -> Vec<u32> {
        self.ids_where(|c| c == TokenClass::HarmSignal)
    }

    pub fn dialect_ids(&self) -> Vec<u32> {
        self.ids_where(|c| c == TokenClass::DialectMarker)
    }

    pub fn identifier_ids(&self, lexicon: usize) -> Vec<u32> {
        self.ids_where(|c| c == TokenClass::Identifier(lexicon))
    }

    pub fn lexicon(&self, lexicon: usize) -> BTreeSet<u32> {
        self.identifier_ids(lexicon).into_iter().collect()
    }

    /// Whitespace tokenization; unknown tokens map to UNK. Empty text maps to
    /// the single-token UNK sequence.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let ids: Vec<u32> = text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(*id));
        }
        out
    }
}

/// One labeled example: token ids, class label, and the per-factor binary
/// attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub token_ids: Vec<u32>,
    pub label: usize,
    pub attributes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Factor defined by the presence of a lexicon token.
    Lexical(BTreeSet<u32>),
    /// Factor given directly as a column of the attribute vector.
    Attribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mitigation {
    ExplanationRegularization,
    Adversarial,
    None,
}

/// Declaration of one bias factor, tied to column `attr_index` of the
/// attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasFactorSpec {
    pub name: String,
    pub attr_index: usize,
    pub kind: FactorKind,
    pub mitigation: Mitigation,
}

impl BiasFactorSpec {
    pub fn lexical(name: &str, attr_index: usize, lexicon: BTreeSet<u32>, mitigation: Mitigation) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(CoreError::config(format!("factor {name}: lexical factors need a non-empty lexicon")));
        }
        Ok(BiasFactorSpec {
            name: name.to_string(),
            attr_index,
            kind: FactorKind::Lexical(lexicon),
            mitigation,
        })
    }

    pub fn attribute(name: &str, attr_index: usize, mitigation: Mitigation) -> Result<Self> {
        if mitigation == Mitigation::ExplanationRegularization {
            return Err(CoreError::config(format!(
                "factor {name}: explanation regularization requires a lexical factor"
            )));
        }
        Ok(BiasFactorSpec {
            name: name.to_string(),
            attr_index,
            kind: FactorKind::Attribute,
            mitigation,
        })
    }

    pub fn lexicon(&self) -> Option<&BTreeSet<u32>> {
        match &self.kind {
            FactorKind::Lexical(lex) => Some(lex),
            FactorKind::Attribute => None,
        }
    }
}

/// Lexical attribute columns derived by scanning tokens; attribute-kind
/// columns are left at `default_attr`.
fn attrs_for(token_ids: &[u32], factors: &[BiasFactorSpec], default_attr: u8) -> Vec<u8> {
    let width = factors.iter().map(|f| f.attr_index + 1).max().unwrap_or(0);
    let mut attrs = vec![0u8; width];
    for factor in factors {
        attrs[factor.attr_index] = match &factor.kind {
            FactorKind::Lexical(lex) => token_ids.iter().any(|t| lex.contains(t)) as u8,
            FactorKind::Attribute => default_attr,
        };
    }
    attrs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InjectionKind {
    /// Replace one neutral token with a member of identifier lexicon `j`.
    Lexicon(usize),
    /// Draw the example's non-harm tokens from the dialect-shifted mixture.
    Dialect,
}

/// Injection rates for one bias factor: probability that the factor is
/// active in harmful vs. normal examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub kind: InjectionKind,
    pub p_pos: f64,
    pub p_neg: f64,
}

impl Injection {
    fn rate(&self, harmful: bool, break_correlation: bool) -> f64 {
        if break_correlation {
            (self.p_pos + self.p_neg) / 2.0
        } else if harmful {
            self.p_pos
        } else {
            self.p_neg
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub harmful: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub len_range: (usize, usize),
    /// Subrange of the harm-signal partition this task draws from; `None`
    /// means the whole partition.
    pub harm_token_range: Option<(usize, usize)>,
    /// Per-position probability that a harmful example's token is replaced by
    /// a harm signal (at least one is always placed).
    pub harm_density: f64,
    pub injections: Vec<Injection>,
    /// Mixing weight toward the dialect-marker unigram distribution for
    /// dialect-member examples.
    pub dialect_shift: f64,
    /// Probability that an example's label is harmful.
    pub label_balance: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Binary task with the crate-wide desk defaults; callers override fields
    /// as needed.
    pub fn binary(seed: u64) -> Self {
        SynthConfig {
            classes: 2,
            harmful: vec![1],
            n_train: 1500,
            n_val: 400,
            n_test: 400,
            len_range: (5, 20),
            harm_token_range: None,
            harm_density: 0.3,
            injections: Vec::new(),
            dialect_shift: 0.8,
            label_balance: 0.5,
            seed,
        }
    }

    fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::config("need at least 2 classes"));
        }
        if self.harmful.is_empty()
            || self.harmful.iter().any(|h| *h >= self.classes)
            || self.harmful.len() >= self.classes
        {
            return Err(CoreError::config("harmful set must be a proper non-empty subset of the label space"));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(CoreError::config("length range must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.dialect_shift) || !(0.0 < self.label_balance && self.label_balance < 1.0) {
            return Err(CoreError::config("dialect_shift must be in [0,1] and label_balance in (0,1)"));
        }
        if !(0.0 < self.harm_density && self.harm_density <= 1.0) {
            return Err(CoreError::config("harm_density must be in (0,1]"));
        }
        let harm = vocab.harm_ids();
        let (lo, hi) = self.harm_token_range.unwrap_or((0, harm.len()));
        if lo >= hi || hi > harm.len() {
            return Err(CoreError::config(format!(
                "harm token range {lo}..{hi} does not fit the partition of {} harm tokens",
                harm.len()
            )));
        }
        if vocab.neutral_ids().is_empty() {
            return Err(CoreError::config("vocabulary has no neutral tokens"));
        }
        let mut dialect_seen = false;
        for inj in &self.injections {
            if !(0.0 <= inj.p_neg && inj.p_neg <= inj.p_pos && inj.p_pos <= 1.0) {
                return Err(CoreError::config("injection rates must satisfy 0 <= p_neg <= p_pos <= 1"));
            }
            match inj.kind {
                InjectionKind::Lexicon(j) => {
                    if vocab.identifier_ids(j).is_empty() {
                        return Err(CoreError::config(format!(
                            "identifier lexicon {j} is empty or absent from the vocabulary"
                        )));
                    }
                }
                InjectionKind::Dialect => {
                    if dialect_seen {
                        return Err(CoreError::config("at most one dialect injection is supported"));
                    }
                    dialect_seen = true;
                    if vocab.dialect_ids().is_empty() {
                        return Err(CoreError::config("vocabulary has no dialect-marker tokens"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Bias factor declarations matching this config's injections, with no
    /// mitigation attached.
    pub fn factors(&self, vocab: &Vocab) -> Result<Vec<BiasFactorSpec>> {
        self.injections
            .iter()
            .enumerate()
            .map(|(idx, inj)| match inj.kind {
                InjectionKind::Lexicon(j) => {
                    BiasFactorSpec::lexical(&format!("lexicon{j}"), idx, vocab.lexicon(j), Mitigation::None)
                }
                InjectionKind::Dialect => BiasFactorSpec::attribute("dialect", idx, Mitigation::None),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Generates train/val/test splits with the configured label balance and
/// injected correlations. Fully deterministic per seed.
pub fn generate_synthetic(vocab: &Vocab, cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate(vocab)?;
    let neutral = vocab.neutral_ids();
    let dialect = vocab.dialect_ids();
    let harm_all = vocab.harm_ids();
    let (lo, hi) = cfg.harm_token_range.unwrap_or((0, harm_all.len()));
    let harm_pool = &harm_all[lo..hi];
    let normal_labels: Vec<usize> = (0..cfg.classes).filter(|c| !cfg.harmful.contains(c)).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "synth"));
    let mut next_id = 0u64;
    let mut gen_split = |n: usize, break_correlation: bool, rng: &mut ChaCha20Rng| -> Vec<Example> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let harmful = rng.random::<f64>() < cfg.label_balance;
            let label = if harmful {
                cfg.harmful[rng.random_range(0..cfg.harmful.len())]
            } else {
                normal_labels[rng.random_range(0..normal_labels.len())]
            };
            let len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);

            let dialect_member = cfg
                .injections
                .iter()
                .find(|inj| inj.kind == InjectionKind::Dialect)
                .map(|inj| rng.random::<f64>() < inj.rate(harmful, break_correlation))
                .unwrap_or(false);

            let mut tokens: Vec<u32> = (0..len)
                .map(|_| {
                    if dialect_member && rng.random::<f64>() < cfg.dialect_shift {
                        dialect[rng.random_range(0..dialect.len())]
                    } else {
                        neutral[rng.random_range(0..neutral.len())]
                    }
                })
                .collect();

            if harmful {
                let mut placed = false;
                for slot in tokens.iter_mut() {
                    if rng.random::<f64>() < cfg.harm_density {
                        *slot = harm_pool[rng.random_range(0..harm_pool.len())];
                        placed = true;
                    }
                }
                if !placed {
                    let pos = rng.random_range(0..len);
                    tokens[pos] = harm_pool[rng.random_range(0..harm_pool.len())];
                }
            }

            for inj in &cfg.injections {
                let InjectionKind::Lexicon(j) = inj.kind else {
                    continue;
                };
                if rng.random::<f64>() < inj.rate(harmful, break_correlation) {
                    let candidates: Vec<usize> = (0..tokens.len())
                        .filter(|p| {
                            matches!(
                                vocab.class(tokens[*p]),
                                TokenClass::Neutral | TokenClass::DialectMarker
                            )
                        })
                        .collect();
                    if !candidates.is_empty() {
                        let pos = candidates[rng.random_range(0..candidates.len())];
                        let pool = vocab.identifier_ids(j);
                        tokens[pos] = pool[rng.random_range(0..pool.len())];
                    }
                }
            }

            let attributes: Vec<u8> = cfg
                .injections
                .iter()
                .map(|inj| match inj.kind {
                    InjectionKind::Lexicon(j) => {
                        let lex = vocab.lexicon(j);
                        tokens.iter().any(|t| lex.contains(t)) as u8
                    }
                    InjectionKind::Dialect => dialect_member as u8,
                })
                .collect();

            out.push(Example {
                id: next_id,
                token_ids: tokens,
                label,
                attributes,
            });
            next_id += 1;
        }
        out
    };

    let train = gen_split(cfg.n_train, false, &mut rng);
    let val = gen_split(cfg.n_val, false, &mut rng);
    let test = gen_split(cfg.n_test, true, &mut rng);
    Ok(SynthSplits { train, val, test })
}

/// A template sentence with a slot for a group identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Carrier {
    pub tokens: Vec<u32>,
    pub slot: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub examples: Vec<Example>,
    /// Identifier-group index of each example, parallel to `examples`.
    pub groups: Vec<usize>,
    pub identifiers: Vec<u32>,
}

/// Cross product of identifiers and carrier templates; labels come from the
/// carrier polarity.
pub fn generate_templates(
    vocab: &Vocab,
    identifiers: &[u32],
    carriers: &[Carrier],
    factors: &[BiasFactorSpec],
) -> Result<TemplateSet> {
    if identifiers.is_empty() {
        return Err(CoreError::config("template generation needs at least one identifier"));
    }
    if !carriers.iter().any(|c| c.label == 0) || !carriers.iter().any(|c| c.label != 0) {
        return Err(CoreError::config(
            "template generation needs at least one non-hate and one hate carrier",
        ));
    }
    for c in carriers {
        if c.slot >= c.tokens.len() {
            return Err(CoreError::config("carrier slot index out of range"));
        }
    }
    for id in identifiers {
        if (*id as usize) >= vocab.size() {
            return Err(CoreError::config("identifier token id out of vocabulary range"));
        }
    }
    let mut examples = Vec::with_capacity(identifiers.len() * carriers.len());
    let mut groups = Vec::with_capacity(examples.capacity());
    let mut next_id = 0u64;
    for (g, ident) in identifiers.iter().enumerate() {
        for carrier in carriers {
            let mut tokens = carrier.tokens.clone();
            tokens[carrier.slot] = *ident;
            let attributes = attrs_for(&tokens, factors, 0);
            examples.push(Example {
                id: next_id,
                token_ids: tokens,
                label: carrier.label,
                attributes,
            });
            groups.push(g);
            next_id += 1;
        }
    }
    Ok(TemplateSet {
        examples,
        groups,
        identifiers: identifiers.to_vec(),
    })
}

/// Deterministic neutral carriers: `n_nonhate` with label 0 and `n_hate` with
/// label 1 (hate carriers embed harm-signal tokens from the given subrange).
pub fn default_carriers(
    vocab: &Vocab,
    harm_token_range: Option<(usize, usize)>,
    n_nonhate: usize,
    n_hate: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Carrier>> {
    if len < 2 {
        return Err(CoreError::config("carriers need at least two tokens"));
    }
    let neutral = vocab.neutral_ids();
    let harm_all = vocab.harm_ids();
    let (lo, hi) = harm_token_range.unwrap_or((0, harm_all.len()));
    if lo >= hi || hi > harm_all.len() {
        return Err(CoreError::config("harm token range out of bounds for carriers"));
    }
    let harm_pool = &harm_all[lo..hi];
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "carriers"));
    let mut out = Vec::with_capacity(n_nonhate + n_hate);
    for i in 0..n_nonhate + n_hate {
        let mut tokens: Vec<u32> = (0..len).map(|_| neutral[rng.random_range(0..neutral.len())]).collect();
        let slot = rng.random_range(0..len);
        let label = if i < n_nonhate { 0 } else { 1 };
        if label == 1 {
            // place two harm signals, avoiding the identifier slot
            for _ in 0..2 {
                let mut pos = rng.random_range(0..len);
                if pos == slot {
                    pos = (pos + 1) % len;
                }
                tokens[pos] = harm_pool[rng.random_range(0..harm_pool.len())];
            }
        }
        out.push(Carrier { tokens, slot, label });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExternalVariant {
    /// Non-harmful text, each example mentioning exactly one identifier.
    IdentifierMentioning { lexicon: usize },
    /// Non-harmful text drawn from the dialect-shifted distribution.
    Dialect { shift: f64 },
}

/// All-negative external corpus for measuring false positives out of domain.
pub fn generate_external_negative(
    vocab: &Vocab,
    variant: ExternalVariant,
    n: usize,
    len_range: (usize, usize),
    factors: &[BiasFactorSpec],
    seed: u64,
) -> Result<Vec<Example>> {
    if len_range.0 < 1 || len_range.0 > len_range.1 {
        return Err(CoreError::config("length range must satisfy 1 <= min <= max"));
    }
    let neutral = vocab.neutral_ids();
    if neutral.is_empty() {
        return Err(CoreError::config("vocabulary has no neutral tokens"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "external"));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(len_range.0..=len_range.1);
        let (tokens, default_attr) = match variant {
            ExternalVariant::IdentifierMentioning { lexicon } => {
                let pool = vocab.identifier_ids(lexicon);
                if pool.is_empty() {
                    return Err(CoreError::config(format!("identifier lexicon {lexicon} is empty")));
                }
                let mut tokens: Vec<u32> =
                    (0..len).map(|_| neutral[rng.random_range(0..neutral.len())]).collect();
                let pos = rng.random_range(0..len);
                tokens[pos] = pool[rng.random_range(0..pool.len())];
                (tokens, 0)
            }
            ExternalVariant::Dialect { shift } => {
                if !(0.0..=1.0).contains(&shift) {
                    return Err(CoreError::config("dialect shift must be in [0,1]"));
                }
                let dialect = vocab.dialect_ids();
                if dialect.is_empty() {
                    return Err(CoreError::config("vocabulary has no dialect-marker tokens"));
                }
                let tokens: Vec<u32> = (0..len)
                    .map(|_| {
                        if rng.random::<f64>() < shift {
                            dialect[rng.random_range(0..dialect.len())]
                        } else {
                            neutral[rng.random_range(0..neutral.len())]
                        }
                    })
                    .collect();
                (tokens, 1)
            }
        };
        let attributes = attrs_for(&tokens, factors, default_attr);
        out.push(Example {
            id: i as u64,
            token_ids: tokens,
            label: 0,
            attributes,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    label: usize,
    attributes: Vec<u8>,
}

/// Parses JSONL content (one record per line, with a `text` field). The label
/// comes from `label_field`; attributes come from `attr_fields`, or are
/// derived from `lexicons` when provided.
pub fn parse_jsonl(
    vocab: &Vocab,
    content: &str,
    label_field: &str,
    attr_fields: &[String],
    lexicons: Option<&[BTreeSet<u32>]>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CoreError::data(format!("line {}: malformed json ({e})", lineno + 1)))?;
        let text = value
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CoreError::data(format!("line {}: missing string field \"text\"", lineno + 1)))?;
        let label = value
            .get(label_field)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                CoreError::data(format!(
                    "line {}: missing integer field {label_field:?}",
                    lineno + 1
                ))
            })? as usize;
        let token_ids = vocab.encode(text);
        let attributes = if let Some(lexicons) = lexicons {
            lexicons
                .iter()
                .map(|lex| token_ids.iter().any(|t| lex.contains(t)) as u8)
                .collect()
        } else {
            let mut attrs = Vec::with_capacity(attr_fields.len());
            for field in attr_fields {
                let v = value.get(field.as_str()).ok_or_else(|| {
                    CoreError::data(format!("line {}: missing attribute field {field:?}", lineno + 1))
                })?;
                // a single array-valued field carries the whole vector
                if let (1, Some(arr)) = (attr_fields.len(), v.as_array()) {
                    for item in arr {
                        attrs.push(parse_bit(item, lineno + 1, field)?);
                    }
                } else {
                    attrs.push(parse_bit(v, lineno + 1, field)?);
                }
            }
            attrs
        };
        out.push(Example {
            id: out.len() as u64,
            token_ids,
            label,
            attributes,
        });
    }
    Ok(out)
}

fn parse_bit(v: &serde_json::Value, lineno: usize, field: &str) -> Result<u8> {
    match (v.as_u64(), v.as_bool()) {
        (Some(0), _) | (_, Some(false)) => Ok(0),
        (Some(1), _) | (_, Some(true)) => Ok(1),
        _ => Err(CoreError::data(format!(
            "line {lineno}: attribute field {field:?} must be 0/1 or a boolean"
        ))),
    }
}

/// Serializes examples to the same JSONL schema `parse_jsonl` accepts
/// (fields: text, label, attributes).
pub fn export_jsonl(vocab: &Vocab, examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let record = JsonlRecord {
            text: vocab.decode(&ex.token_ids),
            label: ex.label,
            attributes: ex.attributes.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

pub struct AttrFilter {
    pub attr_index: usize,
    pub min_conditional: f64,
}

pub struct LexiconExtraction {
    /// Token ids ordered by descending harmful-class coefficient.
    pub tokens: Vec<u32>,
    /// Set when fewer than `k` eligible tokens existed.
    pub truncated: bool,
}

/// Trains a bag-of-words logistic regression (harmful vs. not, term-presence
/// features, L2 weight decay 1e-4, 500 full-batch Adam steps at lr 0.1) and
/// returns the `k` tokens with the largest harmful-class coefficient.
///
/// With an attribute filter, candidates are restricted to tokens `w` with
/// `P(a = 1 | w present) >= min_conditional` estimated from the dataset.
pub fn extract_lexicon(
    vocab: &Vocab,
    data: &[Example],
    harmful: &[usize],
    k: usize,
    filter: Option<&AttrFilter>,
) -> Result<LexiconExtraction> {
    if data.is_empty() {
        return Err(CoreError::usage("extract_lexicon on an empty dataset"));
    }
    if k == 0 {
        return Err(CoreError::usage("extract_lexicon needs k >= 1"));
    }
    let v = vocab.size();
    let n = data.len();

    // term presence with a trailing all-ones bias feature
    let mut x = vec![0.0f64; n * (v + 1)];
    let mut targets = Vec::with_capacity(n);
    for (r, ex) in data.iter().enumerate() {
        for t in &ex.token_ids {
            x[r * (v + 1) + *t as usize] = 1.0;
        }
        x[r * (v + 1) + v] = 1.0;
        targets.push(harmful.contains(&ex.label) as usize);
    }

    let mut weights = Tensor::zeros(vec![v + 1, 2]);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    })?;
    for _ in 0..500 {
        let mut tape = Tape::new();
        let features = tape.constant(Tensor::new(vec![n, v + 1], x.clone())?);
        let w = tape.leaf(weights.clone().with_requires_grad(true));
        let logits = tape.matmul(features, w)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        let decay = tape.sum_squares(w)?;
        let decay_term = tape.scale(decay, 1e-4)?;
        let loss = tape.add(ce, decay_term)?;
        tape.backward(loss)?;
        let grad = tape.grad(w).expect("weights require grad").to_vec();
        let mut grads = alloc::collections::BTreeMap::new();
        grads.insert("w".to_string(), grad);
        adam.step_named(&mut [("w".to_string(), &mut weights)], &grads)?;
    }

    // conditional attribute probability per token, for the optional filter
    let eligible: Vec<u32> = (0..v as u32)
        .filter(|t| match filter {
            None => true,
            Some(f) => {
                let mut present = 0usize;
                let mut with_attr = 0usize;
                for ex in data {
                    if ex.token_ids.contains(t) {
                        present += 1;
                        if ex.attributes.get(f.attr_index).copied().unwrap_or(0) == 1 {
                            with_attr += 1;
                        }
                    }
                }
                present > 0 && (with_attr as f64 / present as f64) >= f.min_conditional
            }
        })
        .collect();

    let coef = |t: u32| weights.at(t as usize, 1) - weights.at(t as usize, 0);
    let mut ranked = eligible;
    ranked.sort_by(|a, b| coef(*b).partial_cmp(&coef(*a)).expect("finite coefficients").then(a.cmp(b)));
    let truncated = ranked.len() < k;
    ranked.truncate(k);
    Ok(LexiconExtraction {
        tokens: ranked,
        truncated,
    })
}
