//! End-to-end greedy generation: entity recognition, fact lookup through the
//! cache tiers, grounded forward passes, and hard constraint masking.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{context_features, GateFeatures, GateParams};
use crate::constrain::{mask_logits, surface_forms, verbalize, ConstraintConfig, ConstraintSet, GuaranteeScope};
use crate::error::{Error, Result};
use crate::kb::{KbStore, Tier, UpdateOutcome};
use crate::linalg::Matrix;
use crate::linker::{assignment_matrix, id_alias, read_alias_file, AliasEntry, EntitySpan, Gazetteer, RecognizerConfig, StreamRecognizer};
use crate::model::{AlphaSpec, Grounding, ToyModel};
use crate::text::{is_interrogative, is_punctuation, tokenize, TokenId, Vocabulary, EOS_ID, UNK_ID};

/// Words every vocabulary starts with, so ordinary prompts and prose map to
/// real tokens.
pub const BASE_WORDS: &[&str] = &[
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", ",", "?", "!", "'", "-", "/", "(", ")", ":", "a", "an",
    "the", "of", "in", "on", "for", "to", "and", "or", "with", "is", "are", "was", "it", "its", "s", "what", "which",
    "how", "many", "much", "does", "do", "have", "has", "use", "about", "write", "tell", "me", "story", "poem",
    "describe", "imagine", "my", "your", "our", "new", "base", "not", "model", "chip", "inch", "display", "main",
    "camera", "up", "at", "by", "from", "as", "that", "this", "there", "be", "can", "will", "would", "should",
    "very", "more", "most", "than", "then", "when", "where", "who", "why", "one", "two", "three", "four", "five",
    "day", "night", "time", "road", "trip", "city", "light", "sea", "ocean", "sky", "rain", "song", "dream", "life",
    "world", "love", "music", "morning", "summer", "winter", "quiet", "bright", "dark", "old", "long", "short",
    "small", "big", "good", "great", "fast", "slow", "phone", "laptop", "car", "battery", "screen", "price", "size",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// 0.8 on questions, 0.2 otherwise.
    Heuristic,
    /// Trained gate parameters.
    Learned,
    /// α = 1 at every position.
    Always,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Self::Heuristic),
            "learned" => Ok(Self::Learned),
            "always" => Ok(Self::Always),
            other => Err(Error::Input(format!("unknown alpha mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// Ground attention in the model's grounded layers.
    pub fga: bool,
    pub constraints: ConstraintConfig,
    pub alpha_mode: AlphaMode,
    /// Required for [`AlphaMode::Learned`].
    pub gate: Option<GateParams>,
    pub max_new_tokens: usize,
    pub recognizer: RecognizerConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            fga: true,
            constraints: ConstraintConfig::default(),
            alpha_mode: AlphaMode::Heuristic,
            gate: None,
            max_new_tokens: 8,
            recognizer: RecognizerConfig::default(),
        }
    }
}

impl GenerationConfig {
    pub fn baseline() -> Self {
        Self {
            fga: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedFact {
    pub entity_id: String,
    pub attribute: String,
}

/// One decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: TokenId,
    pub text: String,
    /// Gate value at the position that produced this token; absent without grounding.
    pub alpha: Option<f64>,
    pub constraint_active: bool,
    pub cache_tier: Option<Tier>,
    pub grounded_fact: Option<GroundedFact>,
}

/// Wall time per pipeline stage, summed over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    /// Forward passes excluding grounding computation.
    pub forward: Duration,
    pub recognition: Duration,
    pub kb_lookup: Duration,
    pub grounding: Duration,
    pub masking: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.forward + self.recognition + self.kb_lookup + self.grounding + self.masking
    }

    pub fn accumulate(&mut self, other: &StageTimings) {
        self.forward += other.forward;
        self.recognition += other.recognition;
        self.kb_lookup += other.kb_lookup;
        self.grounding += other.grounding;
        self.masking += other.masking;
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub prompt_tokens: Vec<String>,
    /// Generated ids, including a final end-of-sequence id if one was produced.
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub trace: Vec<StepRecord>,
    pub spans: Vec<EntitySpan>,
    pub resolved: Option<GroundedFact>,
    pub scope: GuaranteeScope,
    /// Value tokens emitted under a constraint that ran to completion.
    pub answer: Option<Vec<TokenId>>,
    pub answer_text: Option<String>,
    /// The completed answer is a path of the fact's constraint set.
    pub answer_is_path: bool,
    pub timings: StageTimings,
    pub recognizer_invocations: usize,
}

/// Linking and attribute resolution for a prompt.
#[derive(Debug, Clone)]
pub struct PromptAnalysis {
    pub tokens: Vec<String>,
    pub ids: Vec<TokenId>,
    pub spans: Vec<EntitySpan>,
    pub resolved: Option<GroundedFact>,
    pub interrogative: bool,
    pub features: Vec<GateFeatures>,
}

/// Owns the model, vocabulary and gazetteer built over a KB.
pub struct Generator {
    model: ToyModel,
    kb: Arc<KbStore>,
    aliases: Vec<AliasEntry>,
    vocab: Vocabulary,
    gazetteer: Gazetteer,
    keywords: HashSet<String>,
}

impl Generator {
    /// Uses the store's alias file when present.
    pub fn open(model: ToyModel, kb: Arc<KbStore>) -> Result<Self> {
        let path = kb.alias_path();
        let aliases = if path.exists() { read_alias_file(&path)? } else { Vec::new() };
        Self::new(model, kb, aliases)
    }

    pub fn new(model: ToyModel, kb: Arc<KbStore>, aliases: Vec<AliasEntry>) -> Result<Self> {
        if kb.embedding_dim() != model.config().d {
            return Err(Error::Input(format!(
                "store embedding dim {} differs from model hidden size {}",
                kb.embedding_dim(),
                model.config().d
            )));
        }
        let mut vocab = Vocabulary::new(model.config().vocab_size);
        for w in BASE_WORDS {
            vocab.intern(w)?;
        }
        let mut g = Self {
            model,
            kb,
            aliases,
            vocab,
            gazetteer: Gazetteer::build(&[], &[]),
            keywords: HashSet::new(),
        };
        g.rebuild()?;
        Ok(g)
    }

    /// Re-derives vocabulary additions, gazetteer and keyword set from the KB.
    fn rebuild(&mut self) -> Result<()> {
        let mut words = BTreeSet::new();
        let entity_ids = self.kb.entity_ids();
        for fact in self.kb.all_facts() {
            words.extend(surface_forms(&fact).into_iter().flatten());
            words.extend(attribute_tokens(&fact.attribute));
        }
        for id in &entity_ids {
            words.extend(id_alias(id));
        }
        for entry in &self.aliases {
            for a in &entry.aliases {
                words.extend(tokenize(a));
            }
        }
        for w in &words {
            self.vocab.intern(w)?;
        }
        self.gazetteer = Gazetteer::build(&entity_ids, &self.aliases);
        self.keywords = self
            .kb
            .all_facts()
            .iter()
            .flat_map(|f| attribute_tokens(&f.attribute))
            .filter(|t| t.len() >= 3 && t.chars().all(|c| c.is_alphabetic()))
            .collect();
        Ok(())
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn kb(&self) -> &Arc<KbStore> {
        &self.kb
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn gazetteer(&self) -> &Gazetteer {
        &self.gazetteer
    }

    pub fn is_attribute_keyword(&self, token: &str) -> bool {
        self.keywords.contains(token)
    }

    /// Updates the KB and makes the new value's surface forms decodable.
    pub fn update_fact(&mut self, entity_id: &str, attribute: &str, value: &str) -> Result<UpdateOutcome> {
        let out = self.kb.update_fact(entity_id, attribute, value)?;
        let fact = self.kb.get_fact(entity_id, attribute)?;
        for t in surface_forms(&fact).into_iter().flatten() {
            self.vocab.intern(&t)?;
        }
        if out.inserted {
            self.rebuild()?;
        }
        Ok(out)
    }

    /// Links entities and resolves the (entity, attribute) the prompt asks about.
    pub fn analyze(&self, prompt: &str, recognizer: RecognizerConfig) -> Result<PromptAnalysis> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let rec = StreamRecognizer::new(&self.gazetteer, recognizer, tokens.clone());
        let spans = rec.spans().to_vec();
        let interrogative = is_interrogative(&tokens);
        let resolved = self.resolve_fact(&tokens, &spans);
        let features = context_features(&tokens, &spans, interrogative, |t| self.is_attribute_keyword(t));
        Ok(PromptAnalysis {
            ids: self.vocab.encode(&tokens),
            tokens,
            spans,
            resolved,
            interrogative,
            features,
        })
    }

    /// Picks the linked entity attribute whose name tokens best match the
    /// prompt tokens outside entity mentions: most matched tokens, then the
    /// larger matched fraction, then first mention and attribute order.
    pub fn resolve_fact(&self, tokens: &[String], spans: &[EntitySpan]) -> Option<GroundedFact> {
        let outside: Vec<&str> = tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| !spans.iter().any(|s| s.contains(*i)) && !is_punctuation(t))
            .map(|(_, t)| t.as_str())
            .collect();
        let mut seen = Vec::new();
        let mut best: Option<(usize, f64, GroundedFact)> = None;
        for s in spans {
            if seen.contains(&s.entity_id) {
                continue;
            }
            seen.push(s.entity_id.clone());
            let Ok(facts) = self.kb.facts(&s.entity_id) else { continue };
            for f in facts {
                let parts = attribute_tokens(&f.attribute);
                let hits = parts.iter().filter(|p| outside.iter().any(|o| tokens_match(p, o))).count();
                if hits == 0 {
                    continue;
                }
                let frac = hits as f64 / parts.len() as f64;
                let better = match &best {
                    None => true,
                    Some((h, fr, _)) => hits > *h || (hits == *h && frac > *fr),
                };
                if better {
                    best = Some((
                        hits,
                        frac,
                        GroundedFact {
                            entity_id: s.entity_id.clone(),
                            attribute: f.attribute,
                        },
                    ));
                }
            }
        }
        best.map(|(_, _, g)| g)
    }

    pub fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<GenerationOutput> {
        config.constraints.validate()?;
        if config.fga && config.alpha_mode == AlphaMode::Learned && config.gate.is_none() {
            return Err(Error::Input("learned alpha mode needs gate parameters".into()));
        }
        let mut timings = StageTimings::default();
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let started = Instant::now();
        let mut recognizer = StreamRecognizer::new(&self.gazetteer, config.recognizer, tokens.clone());
        timings.recognition += started.elapsed();
        let interrogative = is_interrogative(&tokens);
        let resolved = self.resolve_fact(&tokens, recognizer.spans());
        let mut ids = self.vocab.encode(&tokens);

        let mut scope = GuaranteeScope {
            entity_ok: resolved.is_some(),
            ..Default::default()
        };
        let mut constraint: Option<ConstraintSet> = None;
        if let Some(r) = &resolved {
            if let Ok(fact) = self.kb.get_fact(&r.entity_id, &r.attribute) {
                scope.kb_covered = true;
                match verbalize(&fact, &self.vocab) {
                    Ok(set) => constraint = Some(set),
                    Err(e) => log::warn!("{e}; constraint disabled"),
                }
            }
        }
        let use_constraint = config.fga && config.constraints.enabled;

        let mut generated: Vec<TokenId> = Vec::new();
        let mut trace = Vec::new();
        let mut state = None;
        let mut answer = None;
        let mut gate_held = false;
        let mut violated = false;
        for step in 0..config.max_new_tokens {
            let (grounding, cache_tier) = if config.fga {
                let (g, tier) = self.grounding(&recognizer, interrogative, resolved.as_ref(), config, &mut timings)?;
                (Some(g), tier)
            } else {
                (None, None)
            };
            let started = Instant::now();
            let out = self.model.run(&ids, grounding.as_ref(), true)?;
            timings.forward += started.elapsed().saturating_sub(out.grounding_time);
            timings.grounding += out.grounding_time;
            let alpha = out.alpha.as_ref().and_then(|a| a.last().copied());

            let started = Instant::now();
            let mut logits = out.logits.row(0).to_vec();
            self.restrict_to_vocabulary(&mut logits);
            let a = alpha.unwrap_or(0.0);
            if step == 0 && use_constraint && a >= config.constraints.theta_hard {
                if let Some(set) = &constraint {
                    state = Some(set.start());
                    gate_held = true;
                }
            }
            let mut active = false;
            if let (Some(set), Some(st)) = (&constraint, &state) {
                if a >= config.constraints.theta_hard {
                    match mask_logits(&logits, set, st, a, &config.constraints) {
                        Ok(m) => {
                            logits = m;
                            active = true;
                        }
                        Err(e) => {
                            log::warn!("{e}; falling back to unconstrained decoding");
                            violated = true;
                            state = None;
                        }
                    }
                } else {
                    gate_held = false;
                    state = None;
                }
            }
            timings.masking += started.elapsed();

            let token = argmax(&logits);
            if active {
                let set = constraint.as_ref().expect("active implies a set");
                let st = state.as_mut().expect("active implies a state");
                if set.advance(st, token).is_err() {
                    violated = true;
                    state = None;
                } else if st.is_finished() {
                    answer = Some(st.emitted().to_vec());
                    state = None;
                }
            }
            trace.push(StepRecord {
                step,
                token,
                text: self.vocab.token(token).to_string(),
                alpha,
                constraint_active: active,
                cache_tier,
                grounded_fact: if active { resolved.clone() } else { None },
            });
            generated.push(token);
            if token == EOS_ID {
                break;
            }
            ids.push(token);
            let started = Instant::now();
            recognizer.push(self.vocab.token(token).to_string());
            timings.recognition += started.elapsed();
        }

        for r in &trace {
            if r.constraint_active {
                debug_assert!(r.alpha.unwrap_or(0.0) >= config.constraints.theta_hard);
            }
        }
        scope.gate_ok = gate_held && answer.is_some();
        scope.surface_covered = constraint.is_some() && !violated && answer.is_some();
        let answer_is_path = match (&answer, &constraint) {
            (Some(a), Some(set)) => set.contains_path(a),
            _ => false,
        };
        let started = Instant::now();
        recognizer.refresh();
        timings.recognition += started.elapsed();
        Ok(GenerationOutput {
            prompt_tokens: tokens,
            text: self.vocab.decode(&generated),
            answer_text: answer.as_ref().map(|a| self.vocab.decode(a)),
            tokens: generated,
            trace,
            spans: recognizer.spans().to_vec(),
            resolved,
            scope,
            answer,
            answer_is_path,
            timings,
            recognizer_invocations: recognizer.invocations(),
        })
    }

    fn grounding(
        &self,
        recognizer: &StreamRecognizer<'_>,
        interrogative: bool,
        resolved: Option<&GroundedFact>,
        config: &GenerationConfig,
        timings: &mut StageTimings,
    ) -> Result<(Grounding, Option<Tier>)> {
        let tokens = recognizer.tokens();
        let len = tokens.len();
        let started = Instant::now();
        let spans: Vec<EntitySpan> = recognizer
            .spans()
            .iter()
            .filter(|s| self.kb.contains_entity(&s.entity_id))
            .cloned()
            .collect();
        let assignment = assignment_matrix(&spans, len)?;
        let mut embeddings = Matrix::zeros(assignment.num_entities(), self.model.config().d);
        let mut tier = None;
        for (row, entity) in assignment.entities.iter().enumerate() {
            let (emb, t) = self.kb.lookup_with_cache(entity)?;
            embeddings.row_mut(row).copy_from_slice(&emb.vector);
            if tier.is_none() || resolved.is_some_and(|r| &r.entity_id == entity) {
                tier = Some(t);
            }
        }
        timings.kb_lookup += started.elapsed();

        let started = Instant::now();
        let alpha = match config.alpha_mode {
            AlphaMode::Always => AlphaSpec::Fixed(vec![1.0; len]),
            mode => AlphaSpec::Gate {
                params: if mode == AlphaMode::Learned {
                    config.gate.clone().expect("checked by generate")
                } else {
                    GateParams::heuristic()
                },
                features: context_features(tokens, &spans, interrogative, |t| self.is_attribute_keyword(t)),
            },
        };
        timings.grounding += started.elapsed();
        Ok((
            Grounding {
                fact_embeddings: embeddings,
                assignment: assignment.matrix,
                alpha,
            },
            tier,
        ))
    }

    /// Unassigned ids and the padding/unknown specials are never generated.
    fn restrict_to_vocabulary(&self, logits: &mut [f64]) {
        let n = self.vocab.len();
        for (id, l) in logits.iter_mut().enumerate() {
            if id >= n || id == 0 || id as TokenId == UNK_ID {
                *l = f64::NEG_INFINITY;
            }
        }
    }
}

/// `battery_capacity` → `battery`, `capacity`.
pub fn attribute_tokens(attribute: &str) -> Vec<String> {
    tokenize(&attribute.replace('_', " "))
}

/// Equal, or both at least four characters with one a prefix of the other
/// (`weigh` / `weight`).
fn tokens_match(a: &str, b: &str) -> bool {
    a == b || (a.len() >= 4 && b.len() >= 4 && (a.starts_with(b) || b.starts_with(a)))
}

/// Highest logit; ties go to the lowest id.
fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{FactRecord, StoreOptions};
    use crate::model::ToyModelConfig;
    use chrono::Utc;

    fn fact(entity: &str, attribute: &str, value: &str, unit: Option<&str>) -> FactRecord {
        FactRecord {
            entity_id: entity.into(),
            attribute: attribute.into(),
            value: value.into(),
            unit: unit.map(String::from),
            confidence: 1.0,
            source: "test".into(),
            timestamp: Utc::now(),
        }
    }

    fn setup(dir: &std::path::Path) -> Generator {
        let mut opts = StoreOptions::new(dir);
        opts.embedding_dim = 16;
        opts.durable = false;
        let kb = Arc::new(KbStore::open(opts).unwrap());
        kb.import_records(vec![
            fact("phone:iphone_15_pro", "battery_capacity", "3274 mAh", Some("mAh")),
            fact("phone:iphone_15_pro", "battery_life", "23 hours", Some("hours")),
            fact("phone:iphone_15_pro", "weight", "187 g", Some("g")),
            fact("phone:iphone_15", "battery_capacity", "3349 mAh", Some("mAh")),
        ])
        .unwrap();
        let model = ToyModel::new(ToyModelConfig {
            vocab_size: 512,
            d: 16,
            d_k: 4,
            heads: 2,
            layers: 2,
            fga_layers: vec![1],
            max_positions: 64,
            ..Default::default()
        })
        .unwrap();
        Generator::new(model, kb, vec![]).unwrap()
    }

    #[test]
    fn resolves_best_attribute() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let a = g.analyze("What is the battery capacity of the iPhone 15 Pro?", RecognizerConfig::default()).unwrap();
        assert_eq!(
            a.resolved,
            Some(GroundedFact {
                entity_id: "phone:iphone_15_pro".into(),
                attribute: "battery_capacity".into()
            })
        );
        let w = g.analyze("How much does the iPhone 15 Pro weigh?", RecognizerConfig::default()).unwrap();
        assert_eq!(w.resolved.unwrap().attribute, "weight");
        let none = g.analyze("Write a poem about the sea", RecognizerConfig::default()).unwrap();
        assert!(none.resolved.is_none() && none.spans.is_empty());
    }

    #[test]
    fn constrained_answer_is_the_kb_value() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let out = g
            .generate("What is the battery capacity of the iPhone 15 Pro?", &GenerationConfig::default())
            .unwrap();
        assert!(out.scope.holds(), "{:?}", out.scope);
        assert!(out.answer_is_path);
        assert!(crate::text::contains_answer(&out.text, "3274 mAh"), "{}", out.text);
        let first = &out.trace[0];
        assert!(first.constraint_active);
        assert_eq!(first.alpha, Some(0.8));
        assert_eq!(first.cache_tier, Some(Tier::Store));
        assert_eq!(out.trace[1].cache_tier, Some(Tier::Hot));
        assert_eq!(out.trace.len(), out.tokens.len());
    }

    #[test]
    fn update_is_visible_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = setup(dir.path());
        g.update_fact("phone:iphone_15_pro", "battery_capacity", "3500 mAh").unwrap();
        let out = g
            .generate("What is the battery capacity of the iPhone 15 Pro?", &GenerationConfig::default())
            .unwrap();
        assert!(crate::text::contains_answer(&out.text, "3500"), "{}", out.text);
        assert!(!crate::text::contains_answer(&out.text, "3274"));
    }

    #[test]
    fn no_entity_means_no_constraint() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let out = g.generate("Tell me a story about the sea.", &GenerationConfig::default()).unwrap();
        assert!(out.trace.iter().all(|r| !r.constraint_active && r.grounded_fact.is_none()));
        assert!(out.trace.iter().all(|r| r.alpha == Some(0.2)));
        assert!(!out.scope.holds());
    }

    #[test]
    fn baseline_has_no_gate_or_constraint() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let out = g
            .generate("What is the battery capacity of the iPhone 15 Pro?", &GenerationConfig::baseline())
            .unwrap();
        assert!(out.trace.iter().all(|r| r.alpha.is_none() && !r.constraint_active && r.cache_tier.is_none()));
        assert!(!out.scope.gate_ok);
    }

    #[test]
    fn constraints_off_and_always_mode() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let q = "What is the battery capacity of the iPhone 15 Pro?";
        let off = GenerationConfig {
            constraints: ConstraintConfig {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(g.generate(q, &off).unwrap().trace.iter().all(|r| !r.constraint_active));
        let always = GenerationConfig {
            alpha_mode: AlphaMode::Always,
            ..Default::default()
        };
        let out = g.generate("Tell me about the iPhone 15 Pro battery capacity", &always).unwrap();
        assert_eq!(out.trace[0].alpha, Some(1.0));
        assert!(out.scope.holds());
        let learned = GenerationConfig {
            alpha_mode: AlphaMode::Learned,
            ..Default::default()
        };
        assert!(matches!(g.generate(q, &learned), Err(Error::Input(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = setup(dir.path());
        let cfg = GenerationConfig::baseline();
        let a = g.generate("Describe the night sky", &cfg).unwrap();
        let b = g.generate("Describe the night sky", &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.iter().all(|&t| (t as usize) < g.vocab().len() && t != UNK_ID));
    }

    #[test]
    fn token_matching_rule() {
        assert!(tokens_match("weigh", "weight"));
        assert!(tokens_match("ram", "ram"));
        assert!(!tokens_match("ra", "range"));
        assert!(!tokens_match("the", "they"));
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
