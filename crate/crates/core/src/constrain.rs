//! Hard constraints: a retrieved fact becomes a trie of allowed token paths,
//! and output logits outside the current frontier are set to `-inf` while the
//! gate is confident.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::FactRecord;
use crate::text::{grouped_numeral, is_numeric, plain_numeral, tokenize, TokenId, Vocabulary, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    pub theta_hard: f64,
    pub enabled: bool,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            theta_hard: 0.8,
            enabled: true,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_hard > 0.0 && self.theta_hard <= 1.0) {
            return Err(Error::Input(format!("theta_hard {} outside (0, 1]", self.theta_hard)));
        }
        Ok(())
    }
}

/// The four conditions under which constrained output is exactly a KB value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuaranteeScope {
    pub gate_ok: bool,
    pub entity_ok: bool,
    pub kb_covered: bool,
    pub surface_covered: bool,
}

impl GuaranteeScope {
    pub fn holds(&self) -> bool {
        self.gate_ok && self.entity_ok && self.kb_covered && self.surface_covered
    }
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

/// Trie of token sequences that render one fact's value.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    nodes: Vec<Node>,
    pub entity_id: String,
    pub attribute: String,
    pub value: String,
}

/// Surface forms of a fact's value, as token sequences: the canonical value,
/// the value with and without its unit, and grouped/plain numeral variants.
pub fn surface_forms(fact: &FactRecord) -> Vec<Vec<String>> {
    let value = tokenize(&fact.value);
    let mut bases = vec![value.clone()];
    if let Some(unit) = fact.unit.as_deref().map(tokenize).filter(|u| !u.is_empty()) {
        if value.len() > unit.len() && value.ends_with(&unit) {
            bases.push(value[..value.len() - unit.len()].to_vec());
        } else if !value.ends_with(&unit) {
            bases.push(value.iter().chain(&unit).cloned().collect());
        }
    }
    let mut forms: Vec<Vec<String>> = Vec::new();
    let mut add = |f: Vec<String>| {
        if !f.is_empty() && !forms.contains(&f) {
            forms.push(f);
        }
    };
    for base in bases {
        add(base.clone());
        let plain: Vec<String> = base
            .iter()
            .map(|t| if is_numeric(t) { plain_numeral(t) } else { t.clone() })
            .collect();
        let grouped: Vec<String> = plain
            .iter()
            .map(|t| grouped_numeral(t).unwrap_or_else(|| t.clone()))
            .collect();
        add(plain);
        add(grouped);
    }
    forms
}

/// Builds the constraint trie for `fact` over `vocab`.
pub fn verbalize(fact: &FactRecord, vocab: &Vocabulary) -> Result<ConstraintSet> {
    let forms = surface_forms(fact);
    if forms.is_empty() {
        return Err(Error::Verbalization(fact.value.clone()));
    }
    let mut set = ConstraintSet {
        nodes: vec![Node::default()],
        entity_id: fact.entity_id.clone(),
        attribute: fact.attribute.clone(),
        value: fact.value.clone(),
    };
    for form in forms {
        let ids = form
            .iter()
            .map(|t| vocab.id(t).ok_or_else(|| Error::Verbalization(format!("{} (token {t:?} not in vocabulary)", fact.value))))
            .collect::<Result<Vec<_>>>()?;
        set.insert(&ids);
    }
    Ok(set)
}

impl ConstraintSet {
    /// A set that allows exactly the given paths.
    pub fn from_paths(paths: &[Vec<TokenId>]) -> Self {
        let mut set = Self {
            nodes: vec![Node::default()],
            entity_id: String::new(),
            attribute: String::new(),
            value: String::new(),
        };
        for p in paths.iter().filter(|p| !p.is_empty()) {
            set.insert(p);
        }
        set
    }

    fn insert(&mut self, path: &[TokenId]) {
        let mut at = 0;
        for &id in path {
            at = match self.nodes[at].children.get(&id) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[at].children.insert(id, next);
                    next
                }
            };
        }
        self.nodes[at].terminal = true;
    }

    /// Every accepted token sequence, in lexicographic id order.
    pub fn paths(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(prefix.clone());
            }
            for (&id, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(id);
                stack.push((child, p));
            }
        }
        out.sort();
        out
    }

    pub fn contains_path(&self, path: &[TokenId]) -> bool {
        let mut at = 0;
        for id in path {
            match self.nodes[at].children.get(id) {
                Some(&next) => at = next,
                None => return false,
            }
        }
        self.nodes[at].terminal
    }

    pub fn start(&self) -> ConstraintState {
        ConstraintState {
            node: 0,
            finished: self.nodes[0].children.is_empty(),
            emitted: Vec::new(),
        }
    }

    /// Tokens allowed next. A node that completes one path but prefixes a
    /// longer one also admits end-of-sequence.
    pub fn frontier(&self, state: &ConstraintState) -> Vec<TokenId> {
        if state.finished {
            return Vec::new();
        }
        let node = &self.nodes[state.node];
        let mut f: Vec<TokenId> = node.children.keys().copied().collect();
        if node.terminal && !f.contains(&EOS_ID) {
            f.push(EOS_ID);
            f.sort_unstable();
        }
        f
    }

    /// Moves `state` along `token`; leaving the trie is a violation.
    pub fn advance(&self, state: &mut ConstraintState, token: TokenId) -> Result<()> {
        if state.finished {
            return Err(Error::ConstraintViolation("constraint already complete".into()));
        }
        let node = &self.nodes[state.node];
        if let Some(&next) = node.children.get(&token) {
            state.node = next;
            state.emitted.push(token);
            let n = &self.nodes[next];
            state.finished = n.terminal && n.children.is_empty();
            Ok(())
        } else if token == EOS_ID && node.terminal {
            state.finished = true;
            Ok(())
        } else {
            Err(Error::ConstraintViolation(format!(
                "token {token} leaves the allowed paths for {}/{}",
                self.entity_id, self.attribute
            )))
        }
    }
}

/// Position of a decoder inside a [`ConstraintSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintState {
    node: usize,
    finished: bool,
    emitted: Vec<TokenId>,
}

impl ConstraintState {
    /// True once a complete path has been emitted; the constraint then no longer applies.
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Value tokens emitted under this constraint so far.
    pub fn emitted(&self) -> &[TokenId] {
        &self.emitted
    }
}

/// Sets logits outside the frontier to `-inf` when the gate is at or above
/// `theta_hard`; otherwise returns them unchanged.
pub fn mask_logits(
    logits: &[f64],
    set: &ConstraintSet,
    state: &ConstraintState,
    alpha: f64,
    config: &ConstraintConfig,
) -> Result<Vec<f64>> {
    if !config.enabled || alpha < config.theta_hard || state.finished {
        return Ok(logits.to_vec());
    }
    let frontier = set.frontier(state);
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    let mut any = false;
    for id in frontier {
        if let Some(&l) = logits.get(id as usize) {
            out[id as usize] = l;
            any = true;
        }
    }
    if !any {
        return Err(Error::ConstraintViolation(format!(
            "empty frontier for {}/{}",
            set.entity_id, set.attribute
        )));
    }
    Ok(out)
}
