// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Dataset, Example, Label, ReasoningTree, TaskConfig, TaskKind, Vocab};
use crate::error::{bail, Result};
use crate::rng;

const DISTRACTOR_RETRIES: usize = 1000;

/// Split the content symbols into (entities, attributes).
pub(crate) fn symbol_split(content: u32) -> (u32, u32) {
    let entities = (content / 4).max(1).min(content);
    (entities, content - entities)
}

/// A decoded chain-task statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Statement {
    /// `entity HAS attribute`, or its negation.
    Fact {
        entity: u32,
        attribute: u32,
        positive: bool,
    },
    /// `premise IMPLIES conclusion`, or "premise implies not conclusion".
    Rule {
        premise: u32,
        conclusion: u32,
        positive: bool,
    },
}

impl Statement {
    pub fn encode(&self, vocab: &Vocab) -> [u32; 4] {
        let pol = |p: bool| if p { vocab.pos() } else { vocab.neg() };
        match *self {
            Statement::Fact {
                entity,
                attribute,
                positive,
            } => [entity, vocab.has(), attribute, pol(positive)],
            Statement::Rule {
                premise,
                conclusion,
                positive,
            } => [premise, vocab.implies(), conclusion, pol(positive)],
        }
    }

    pub fn decode(tokens: &[u32], vocab: &Vocab) -> Result<Self> {
        let &[a, rel, b, pol] = tokens else {
            bail!(Data, "statement must be 4 tokens, got {}", tokens.len());
        };
        let positive = if pol == vocab.pos() {
            true
        } else if pol == vocab.neg() {
            false
        } else {
            bail!(Data, "token {pol} is not a polarity marker");
        };
        if vocab.is_special(a) || vocab.is_special(b) {
            bail!(Data, "statement arguments must be content symbols");
        }
        match rel {
            r if r == vocab.has() => Ok(Statement::Fact {
                entity: a,
                attribute: b,
                positive,
            }),
            r if r == vocab.implies() => Ok(Statement::Rule {
                premise: a,
                conclusion: b,
                positive,
            }),
            _ => bail!(Data, "token {rel} is not a relation"),
        }
    }

    fn key(&self) -> (bool, u32, u32) {
        match *self {
            Statement::Fact {
                entity, attribute, ..
            } => (false, entity, attribute),
            Statement::Rule {
                premise,
                conclusion,
                ..
            } => (true, premise, conclusion),
        }
    }

    fn mentions_attribute(&self, attr: u32) -> bool {
        match *self {
            Statement::Fact { attribute, .. } => attribute == attr,
            Statement::Rule {
                premise,
                conclusion,
                ..
            } => premise == attr || conclusion == attr,
        }
    }
}

/// A derived literal `entity has (not) attribute`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Literal {
    pub entity: u32,
    pub attribute: u32,
    pub positive: bool,
}

/// Forward-chain `statements` to a fixpoint and answer `(entity ASK attribute)`.
///
/// Only positive literals trigger rules. Returns `None` when neither polarity
/// is derivable or when both are.
pub fn entails(statements: &[Statement], entity: u32, attribute: u32) -> Option<Label> {
    let mut known: BTreeSet<Literal> = statements
        .iter()
        .filter_map(|s| match *s {
            Statement::Fact {
                entity,
                attribute,
                positive,
            } => Some(Literal {
                entity,
                attribute,
                positive,
            }),
            Statement::Rule { .. } => None,
        })
        .collect();
    loop {
        let mut fresh = Vec::new();
        for lit in known.iter().filter(|l| l.positive) {
            for s in statements {
                if let Statement::Rule {
                    premise,
                    conclusion,
                    positive,
                } = *s
                {
                    let new = Literal {
                        entity: lit.entity,
                        attribute: conclusion,
                        positive,
                    };
                    if premise == lit.attribute && !known.contains(&new) {
                        fresh.push(new);
                    }
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        known.extend(fresh);
    }
    let yes = known.contains(&Literal {
        entity,
        attribute,
        positive: true,
    });
    let no = known.contains(&Literal {
        entity,
        attribute,
        positive: false,
    });
    match (yes, no) {
        (true, false) => Some(Label::True),
        (false, true) => Some(Label::False),
        _ => None,
    }
}

/// Generate balanced chain-proof examples with a unique gold proof.
///
/// Even ids are `True`, odd ids `False`. Distractors never mention the
/// queried attribute, never restate the gold fact's (entity, attribute) pair
/// and never conclude the gold rule's premise, in either polarity. That keeps
/// the gold proof the only proof, even after any distractor is negated.
pub fn gen_chain_proof(cfg: &TaskConfig, split_seed: u64) -> Result<Dataset> {
    if cfg.task != TaskKind::ChainProof {
        bail!(
            Config,
            "gen_chain_proof called with a {:?} config",
            cfg.task
        );
    }
    cfg.validate()?;
    let vocab = cfg.vocab();
    let (n_entities, n_attributes) = symbol_split(cfg.vocab_size);
    let entity_of = |x: u32| x;
    let attribute_of = |x: u32| n_entities + x;

    let mut examples = Vec::with_capacity(cfg.n_examples as usize);
    for id in 0..cfg.n_examples {
        let mut rng = rng::stream(cfg.seed, &[split_seed, id]);
        let label = if id % 2 == 0 {
            Label::True
        } else {
            Label::False
        };
        let polarity = label == Label::True;
        let entity = entity_of(rng.random_range(0..n_entities));
        let target = attribute_of(rng.random_range(0..n_attributes));

        let (gold, premise) = if cfg.chain_depth == 0 {
            (
                alloc::vec![Statement::Fact {
                    entity,
                    attribute: target,
                    positive: polarity,
                }],
                None,
            )
        } else {
            let premise = loop {
                let a = attribute_of(rng.random_range(0..n_attributes));
                if a != target {
                    break a;
                }
            };
            (
                alloc::vec![
                    Statement::Fact {
                        entity,
                        attribute: premise,
                        positive: true,
                    },
                    Statement::Rule {
                        premise,
                        conclusion: target,
                        positive: polarity,
                    },
                ],
                Some(premise),
            )
        };
        let mut statements = gold.clone();
        let mut keys: BTreeSet<(bool, u32, u32)> = statements.iter().map(Statement::key).collect();
        while statements.len() < cfg.n_statements as usize {
            let mut accepted = None;
            for _ in 0..DISTRACTOR_RETRIES {
                let positive = rng.random_bool(0.5);
                let cand = if rng.random_bool(0.5) {
                    Statement::Fact {
                        entity: entity_of(rng.random_range(0..n_entities)),
                        attribute: attribute_of(rng.random_range(0..n_attributes)),
                        positive,
                    }
                } else {
                    let p = attribute_of(rng.random_range(0..n_attributes));
                    let c = attribute_of(rng.random_range(0..n_attributes));
                    if p == c {
                        continue;
                    }
                    Statement::Rule {
                        premise: p,
                        conclusion: c,
                        positive,
                    }
                };
                if cand.mentions_attribute(target) || keys.contains(&cand.key()) {
                    continue;
                }
                if let Some(premise) = premise {
                    let blocked = match cand {
                        Statement::Fact {
                            entity: e,
                            attribute,
                            ..
                        } => e == entity && attribute == premise,
                        Statement::Rule { conclusion, .. } => conclusion == premise,
                    };
                    if blocked {
                        continue;
                    }
                }
                accepted = Some(cand);
                break;
            }
            let Some(cand) = accepted else {
                bail!(
                    Generation,
                    "example {id}: no admissible distractor after {DISTRACTOR_RETRIES} draws"
                );
            };
            keys.insert(cand.key());
            statements.push(cand);
        }
        statements.shuffle(&mut rng);

        if entails(&statements, entity, target) != Some(label) {
            bail!(
                Generation,
                "example {id}: statements do not entail the intended label"
            );
        }

        let mut tokens = Vec::with_capacity(cfg.seq_len());
        let mut statement_spans = Vec::with_capacity(statements.len());
        for s in &statements {
            let start = tokens.len() as u32;
            tokens.extend_from_slice(&s.encode(&vocab));
            statement_spans.push((start, start + 4));
        }
        let q0 = tokens.len() as u32;
        tokens.extend_from_slice(&[entity, vocab.ask(), target]);

        let mut nodes = Vec::with_capacity(gold.len());
        let mut heights = Vec::with_capacity(gold.len());
        for (h, g) in gold.iter().enumerate() {
            let idx = statements.iter().position(|s| s == g).unwrap() as u32;
            nodes.push(idx);
            heights.push(h as u32);
        }
        examples.push(Example {
            id,
            task: TaskKind::ChainProof,
            tokens,
            statement_spans,
            question_span: Some((q0, q0 + 3)),
            answer: if polarity { vocab.yes() } else { vocab.no() },
            tree: ReasoningTree::new(nodes, heights)?,
            k: None,
            label: Some(label),
        });
    }
    Ok(Dataset::new(examples))
}

/// Negate one uniformly chosen statement that is not in the gold tree.
///
/// The polarity token of that statement is flipped; answer, label and tree
/// are carried over unchanged.
pub fn corrupt_useless(ex: &Example, vocab: &Vocab, rng_seed: u64) -> Result<Example> {
    if ex.task != TaskKind::ChainProof {
        bail!(
            Precondition,
            "example {}: only chain-proof statements carry a polarity",
            ex.id
        );
    }
    let useless: Vec<usize> = (0..ex.n_statements())
        .filter(|&i| !ex.tree.contains(i as u32))
        .collect();
    if useless.is_empty() {
        bail!(Precondition, "example {}: every statement is useful", ex.id);
    }
    let mut rng = rng::stream(rng_seed, &[ex.id]);
    let pick = useless[rng.random_range(0..useless.len())];
    let (_, end) = ex.statement_spans[pick];
    let slot = end as usize - 1;
    let mut out = ex.clone();
    out.tokens[slot] = match out.tokens[slot] {
        t if t == vocab.pos() => vocab.neg(),
        t if t == vocab.neg() => vocab.pos(),
        t => bail!(
            Data,
            "example {}: token {t} at {slot} is not a polarity marker",
            ex.id
        ),
    };
    Ok(out)
}

/// Decode every statement of a chain-proof example.
pub fn decode_statements(ex: &Example, vocab: &Vocab) -> Result<Vec<Statement>> {
    ex.statement_spans
        .iter()
        .map(|&(s, e)| Statement::decode(&ex.tokens[s as usize..e as usize], vocab))
        .collect()
}
