//! Guideline knowledge: the plan tree, concepts, patterns, callbacks and
//! messages of one guideline, validated as a unit.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{
    self, parse_expr, parse_unit, quote, substitute_thresholds, AbstractionOp, Aggregator, CmpOp, Expr, ParseError,
    Statement, Threshold, UnitProjection,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineHeader {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ConceptType {
    Numeric,
    Boolean,
    String,
    /// A knowledge threshold; `value` holds the guideline default.
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Concept {
    pub id: String,
    pub name: String,
    pub value_type: ConceptType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard_band: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDef {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PlanKind {
    Periodic,
    Monitoring,
    Sequential,
    Parallel,
    Action,
    Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ActorTag {
    #[default]
    CareProvider,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Plan {
    pub id: String,
    pub name: String,
    pub kind: PlanKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligibility_condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete_condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_condition: Option<String>,
    #[serde(default)]
    pub is_projected: bool,
    #[serde(default)]
    pub is_personalized: bool,
    #[serde(default)]
    pub children: Vec<String>,
    /// Statements of the unit-projection, without the `unitProjection` header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default)]
    pub actor_tag: ActorTag,
    /// Pattern a monitoring plan listens to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listens_to: Option<String>,
    /// Message an action plan delivers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Plan {
    pub fn conditions(&self) -> impl Iterator<Item = &String> {
        self.eligibility_condition.iter().chain(self.complete_condition.iter()).chain(self.abort_condition.iter())
    }

    /// Unit-projection text for this plan's body.
    pub fn unit_source(&self) -> Option<String> {
        self.body.as_ref().map(|b| format!("unitProjection({}, {}) {{\n{}\n}}", quote(&self.id), quote(&self.name), b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "mDSS")]
    Mdss,
    #[serde(rename = "BE-DSS")]
    Bedss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionDef {
    pub op: AbstractionOp,
    pub exprs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PatternRef {
    pub id: String,
    pub aggregator: Aggregator,
    pub comparison: CmpOp,
    /// A number or a `<$ID$>` knowledge threshold.
    pub threshold: Threshold,
    pub target: String,
    pub window_days: i64,
    pub level: Level,
    /// Inline abstraction named by `target`, for centrally evaluated patterns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstraction: Option<AbstractionDef>,
}

impl PatternRef {
    /// Threshold id when the threshold is a `<$ID$>` token.
    pub fn threshold_var(&self) -> Option<&str> {
        match &self.threshold {
            Threshold::Var(tok) => Some(tok.trim_start_matches("<$").trim_end_matches("$>")),
            Threshold::Value(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CallbackDef {
    pub id: String,
    pub message: String,
    pub trigger_pattern: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Audience {
    Patient,
    CareProvider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MessageKind {
    Notification,
    Recommendation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageDef {
    pub id: String,
    pub audience: Audience,
    pub kind: MessageKind,
    pub text: String,
}

/// The guideline file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineDoc {
    pub guideline: GuidelineHeader,
    #[serde(default)]
    pub concepts: Vec<Concept>,
    #[serde(default)]
    pub contexts: Vec<ContextDef>,
    pub plans: Vec<Plan>,
    #[serde(default)]
    pub patterns: Vec<PatternRef>,
    #[serde(default)]
    pub callbacks: Vec<CallbackDef>,
    #[serde(default)]
    pub messages: Vec<MessageDef>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KbError {
    #[error("duplicate {kind} id {id:?}")]
    Duplicate { kind: &'static str, id: String },
    #[error("{from} references unknown {kind} {id:?}")]
    Dangling { kind: &'static str, id: String, from: String },
    #[error("plan {plan}: {error}")]
    Body { plan: String, error: ParseError },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KbStats {
    pub raw_concepts: u32,
    pub data_patterns: u32,
    pub conditions: u32,
    pub customized_contexts: u32,
    pub notifications_to_patients: u32,
    pub notifications_to_care_providers: u32,
    pub recommendations_to_patients: u32,
    pub recommendations_to_care_providers: u32,
    pub periodic_projections: u32,
    pub monitoring_projections: u32,
    pub callbacks: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DistributionProfile {
    MostlyLocal,
    MostlyCentral,
    Balanced,
}

/// Where the guideline is mostly controlled, from the ratio of callbacks to
/// projected periodic plans.
pub fn distribution_profile(stats: &KbStats) -> DistributionProfile {
    let p = stats.periodic_projections;
    let c = stats.callbacks;
    if p == 0 {
        return DistributionProfile::Balanced;
    }
    if c <= p.div_ceil(4) {
        DistributionProfile::MostlyLocal
    } else if c >= p.div_ceil(2) {
        DistributionProfile::MostlyCentral
    } else {
        DistributionProfile::Balanced
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Horizon {
    ShortTerm,
    LongTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DataSources {
    LocalOnly,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Computation {
    ShortPattern,
    LongitudinalPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlanTraits {
    pub horizon: Horizon,
    pub needs_phr: bool,
    pub population_data: bool,
    pub data_sources: DataSources,
    pub computation: Computation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    #[serde(rename = "mDSS")]
    Mdss,
    #[serde(rename = "BE-DSS")]
    Bedss,
}

/// Characteristics that call for central execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PlacementRule {
    PhrAccess,
    PopulationData,
    LongTermHorizon,
    MixedDataSources,
    LongitudinalComputation,
}

pub fn suggest_placement(t: &PlanTraits) -> (Placement, Vec<PlacementRule>) {
    let mut fired = Vec::new();
    if t.needs_phr {
        fired.push(PlacementRule::PhrAccess);
    }
    if t.population_data {
        fired.push(PlacementRule::PopulationData);
    }
    if t.horizon == Horizon::LongTerm {
        fired.push(PlacementRule::LongTermHorizon);
    }
    if t.data_sources == DataSources::Mixed {
        fired.push(PlacementRule::MixedDataSources);
    }
    if t.computation == Computation::LongitudinalPattern {
        fired.push(PlacementRule::LongitudinalComputation);
    }
    let placement = if fired.is_empty() { Placement::Mdss } else { Placement::Bedss };
    (placement, fired)
}

/// A validated guideline with id indexes.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub doc: GuidelineDoc,
    root: usize,
    plans: BTreeMap<String, usize>,
    parents: BTreeMap<String, String>,
    patterns: BTreeMap<String, usize>,
    concepts: BTreeMap<String, usize>,
    callbacks: BTreeMap<String, usize>,
    messages: BTreeMap<String, usize>,
    abstractions: BTreeMap<String, (AbstractionOp, Vec<Expr>)>,
    units: BTreeMap<String, UnitProjection>,
}

fn index<T>(items: &[T], kind: &'static str, id: impl Fn(&T) -> &String) -> Result<BTreeMap<String, usize>, KbError> {
    let mut out = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if out.insert(id(item).clone(), i).is_some() {
            return Err(KbError::Duplicate { kind, id: id(item).clone() });
        }
    }
    Ok(out)
}

fn dangling(kind: &'static str, id: &str, from: impl Into<String>) -> KbError {
    KbError::Dangling { kind, id: id.into(), from: from.into() }
}

impl KnowledgeBase {
    pub fn new(doc: GuidelineDoc) -> Result<Self, KbError> {
        let plans = index(&doc.plans, "plan", |p| &p.id)?;
        let patterns = index(&doc.patterns, "pattern", |p| &p.id)?;
        let concepts = index(&doc.concepts, "concept", |c| &c.id)?;
        let callbacks = index(&doc.callbacks, "callback", |c| &c.id)?;
        let messages = index(&doc.messages, "message", |m| &m.id)?;
        index(&doc.contexts, "context", |c| &c.id)?;

        // tree shape
        let mut parents = BTreeMap::new();
        for p in &doc.plans {
            for c in &p.children {
                if !plans.contains_key(c) {
                    return Err(dangling("plan", c, format!("plan {}", p.id)));
                }
                if let Some(prev) = parents.insert(c.clone(), p.id.clone()) {
                    return Err(KbError::Invalid(format!("plan {c} appears under both {prev} and {}", p.id)));
                }
            }
        }
        let roots: Vec<usize> = (0..doc.plans.len()).filter(|&i| !parents.contains_key(&doc.plans[i].id)).collect();
        let [root] = roots[..] else {
            return Err(KbError::Invalid(format!("plan graph must have exactly one root, found {}", roots.len())));
        };
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![doc.plans[root].id.clone()];
        while let Some(id) = stack.pop() {
            if seen.insert(id.clone()) {
                stack.extend(doc.plans[plans[&id]].children.iter().cloned());
            }
        }
        if seen.len() != doc.plans.len() {
            return Err(KbError::Invalid("plan graph contains a cycle".into()));
        }

        let is_threshold =
            |id: &str| concepts.get(id).is_some_and(|&i| doc.concepts[i].value_type == ConceptType::Threshold);
        let is_raw = |id: &str| concepts.get(id).is_some_and(|&i| doc.concepts[i].value_type != ConceptType::Threshold);

        for c in &doc.concepts {
            if c.value_type == ConceptType::Threshold && c.value.is_none() {
                return Err(KbError::Invalid(format!("threshold concept {} has no value", c.id)));
            }
            if let Some((lo, hi)) = c.valid_range {
                if lo > hi {
                    return Err(KbError::Invalid(format!("concept {} has an empty valid range", c.id)));
                }
            }
        }

        // abstractions: inline pattern abstractions plus those annotated in projected bodies
        let mut abstractions = BTreeMap::new();
        let check_expr_concepts = |e: &Expr, from: &str| -> Result<(), KbError> {
            for c in e.concepts() {
                if !is_raw(&c) {
                    return Err(dangling("concept", &c, from));
                }
            }
            Ok(())
        };
        for pat in &doc.patterns {
            if pat.window_days < 1 {
                return Err(KbError::Invalid(format!("pattern {} has windowDays < 1", pat.id)));
            }
            if let Some(tok) = pat.threshold_var() {
                if !is_threshold(tok) {
                    return Err(dangling("threshold", tok, format!("pattern {}", pat.id)));
                }
            }
            if let Some(a) = &pat.abstraction {
                if a.exprs.is_empty() {
                    return Err(KbError::Invalid(format!("pattern {} has an empty abstraction", pat.id)));
                }
                let mut exprs = Vec::new();
                for src in &a.exprs {
                    let e = parse_expr(src)
                        .map_err(|error| KbError::Body { plan: format!("pattern {}", pat.id), error })?;
                    check_expr_concepts(&e, &format!("pattern {}", pat.id))?;
                    exprs.push(e);
                }
                abstractions.insert(pat.target.clone(), (a.op, exprs));
            }
        }

        let mut units = BTreeMap::new();
        let mut unit_abstractions = BTreeSet::new();
        for p in &doc.plans {
            let from = format!("plan {}", p.id);
            for cond in p.conditions() {
                if !patterns.contains_key(cond) {
                    return Err(dangling("pattern", cond, from.as_str()));
                }
            }
            if p.kind == PlanKind::Monitoring {
                let Some(pat) = &p.listens_to else {
                    return Err(KbError::Invalid(format!("monitoring plan {} listens to no pattern", p.id)));
                };
                if !patterns.contains_key(pat) {
                    return Err(dangling("pattern", pat, from.as_str()));
                }
            }
            if let Some(m) = &p.message {
                if !messages.contains_key(m) {
                    return Err(dangling("message", m, from.as_str()));
                }
            }
            if p.kind == PlanKind::Action && p.message.is_none() && !p.is_projected {
                return Err(KbError::Invalid(format!("action plan {} delivers no message", p.id)));
            }
            if p.is_projected {
                let Some(src) = p.unit_source().filter(|_| !p.body.as_deref().unwrap_or("").trim().is_empty()) else {
                    return Err(KbError::Invalid(format!("projected plan {} has no body", p.id)));
                };
                let unit = parse_unit(&src).map_err(|error| KbError::Body { plan: p.id.clone(), error })?;
                for tok in lang::threshold_tokens(&src) {
                    if !is_threshold(&tok) {
                        return Err(dangling("threshold", &tok, from.as_str()));
                    }
                }
                let mut local = BTreeSet::new();
                let mut err = None;
                lang::visit(&unit.body, &mut |s| {
                    if err.is_some() {
                        return;
                    }
                    let r = match s {
                        Statement::PatientDataEntry { concept_id, .. } if !is_raw(concept_id) => {
                            Err(dangling("concept", concept_id, from.as_str()))
                        }
                        Statement::AnnotateTemporal { exprs, name, .. } => {
                            local.insert(name.clone());
                            exprs.iter().try_for_each(|e| check_expr_concepts(e, &from))
                        }
                        Statement::WaitTemporalQuery { query } | Statement::IfTemporalQuery { query, .. }
                            if !is_raw(&query.target) && !local.contains(&query.target) =>
                        {
                            Err(dangling("query target", &query.target, from.as_str()))
                        }
                        Statement::Callback { callback_id, .. } if !callbacks.contains_key(callback_id) => {
                            Err(dangling("callback", callback_id, from.as_str()))
                        }
                        Statement::PatientNotification { message_id, .. } if !messages.contains_key(message_id) => {
                            Err(dangling("message", message_id, from.as_str()))
                        }
                        _ => Ok(()),
                    };
                    if let Err(e) = r {
                        err = Some(e);
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
                unit_abstractions.extend(local);
                units.insert(p.id.clone(), unit);
            } else if p.body.is_some() {
                return Err(KbError::Invalid(format!("plan {} has a body but is not projected", p.id)));
            }
        }

        for pat in &doc.patterns {
            let target_ok = is_raw(&pat.target)
                || abstractions.contains_key(&pat.target)
                || (pat.level == Level::Mdss && unit_abstractions.contains(&pat.target));
            if !target_ok {
                return Err(dangling("pattern target", &pat.target, format!("pattern {}", pat.id)));
            }
            if pat.level == Level::Bedss
                && !doc.plans.iter().any(|p| p.kind == PlanKind::Monitoring && p.listens_to.as_ref() == Some(&pat.id))
            {
                return Err(KbError::Invalid(format!(
                    "central pattern {} is not referenced by any monitoring plan",
                    pat.id
                )));
            }
        }

        for cb in &doc.callbacks {
            let Some(&i) = patterns.get(&cb.trigger_pattern) else {
                return Err(dangling("pattern", &cb.trigger_pattern, format!("callback {}", cb.id)));
            };
            if doc.patterns[i].level != Level::Mdss {
                return Err(KbError::Invalid(format!("callback {} must trigger on a device-level pattern", cb.id)));
            }
        }

        Ok(KnowledgeBase { root, plans, parents, patterns, concepts, callbacks, messages, abstractions, units, doc })
    }

    pub fn id(&self) -> &str {
        &self.doc.guideline.id
    }

    pub fn name(&self) -> &str {
        &self.doc.guideline.name
    }

    pub fn root(&self) -> &Plan {
        &self.doc.plans[self.root]
    }

    pub fn plan(&self, id: &str) -> Option<&Plan> {
        self.plans.get(id).map(|&i| &self.doc.plans[i])
    }

    pub fn parent(&self, id: &str) -> Option<&Plan> {
        self.parents.get(id).and_then(|p| self.plan(p))
    }

    pub fn pattern(&self, id: &str) -> Option<&PatternRef> {
        self.patterns.get(id).map(|&i| &self.doc.patterns[i])
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id).map(|&i| &self.doc.concepts[i])
    }

    pub fn callback(&self, id: &str) -> Option<&CallbackDef> {
        self.callbacks.get(id).map(|&i| &self.doc.callbacks[i])
    }

    pub fn message(&self, id: &str) -> Option<&MessageDef> {
        self.messages.get(id).map(|&i| &self.doc.messages[i])
    }

    /// Inline pattern abstraction named `name`.
    pub fn abstraction(&self, name: &str) -> Option<(AbstractionOp, &[Expr])> {
        self.abstractions.get(name).map(|(op, v)| (*op, v.as_slice()))
    }

    /// Parsed unit of a projected plan, thresholds still unsubstituted.
    pub fn unit(&self, plan_id: &str) -> Option<&UnitProjection> {
        self.units.get(plan_id)
    }

    pub fn default_context(&self) -> Option<&ContextDef> {
        self.doc.contexts.first()
    }

    pub fn threshold_values(&self) -> BTreeMap<String, f64> {
        self.doc
            .concepts
            .iter()
            .filter(|c| c.value_type == ConceptType::Threshold)
            .filter_map(|c| c.value.map(|v| (c.id.clone(), v)))
            .collect()
    }

    /// Unit text of a projected plan with thresholds replaced.
    pub fn substituted_unit(
        &self,
        plan_id: &str,
        values: &BTreeMap<String, f64>,
    ) -> Option<Result<String, lang::SubstError>> {
        self.plan(plan_id)?.unit_source().map(|src| substitute_thresholds(&src, values))
    }

    pub fn plans(&self) -> &[Plan] {
        &self.doc.plans
    }

    pub fn stats(&self) -> KbStats {
        kb_statistics(&self.doc)
    }
}

pub fn kb_statistics(doc: &GuidelineDoc) -> KbStats {
    let n = |it: usize| it as u32;
    let msgs = |a: Audience, k: MessageKind| n(doc.messages.iter().filter(|m| m.audience == a && m.kind == k).count());
    KbStats {
        raw_concepts: n(doc.concepts.iter().filter(|c| c.value_type != ConceptType::Threshold).count()),
        data_patterns: n(doc.patterns.len()),
        conditions: n(doc.plans.iter().map(|p| p.conditions().count()).sum()),
        customized_contexts: n(doc.contexts.len()),
        notifications_to_patients: msgs(Audience::Patient, MessageKind::Notification),
        notifications_to_care_providers: msgs(Audience::CareProvider, MessageKind::Notification),
        recommendations_to_patients: msgs(Audience::Patient, MessageKind::Recommendation),
        recommendations_to_care_providers: msgs(Audience::CareProvider, MessageKind::Recommendation),
        periodic_projections: n(doc.plans.iter().filter(|p| p.kind == PlanKind::Periodic && p.is_projected).count()),
        monitoring_projections: n(doc.plans.iter().filter(|p| p.kind == PlanKind::Monitoring).count()),
        callbacks: n(doc.callbacks.len()),
    }
}
