//! Logon policy: the flat default (allow everything) and the tiered
//! policy with per-tier rule records and write-down exceptions.
//!
//! Tiered evaluation allows a logon only when identity, source, and
//! target sit in the same tier (external initial access stands in for a
//! same-tier source), or when a write-down exception explicitly permits a
//! more sensitive identity to reach down. Exceptions never authorize
//! read-up; generation rejects any exception pointing upward.

use crate::classify::TieredSnapshot;
use crate::model::{DeviceClass, TierLabel};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Fixed denial text for cross-tier identity use; surfaced in traces,
/// narratives, and the CLI.
pub const CROSS_TIER_DENIAL: &str = "identity cannot be used across tiers";

/// Purpose tag of the auto-generated domain-controller maintenance
/// exceptions.
pub const DC_CREDENTIAL_UPDATE: &str = "dc-credential-update";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    #[serde(rename = "default-flat")]
    DefaultFlat,
    #[serde(rename = "tiered")]
    Tiered,
}

/// Per-tier rule record: the documentation analogue of one logon GPO.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierRule {
    pub tier: TierLabel,
    pub allow_identity_tiers: Vec<TierLabel>,
    pub deny_identity_tiers: Vec<TierLabel>,
}

/// Selects either one concrete object or a whole tier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Selector {
    Tier(TierLabel),
    Id(String),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Tier(t) => write!(f, "tier:{t}"),
            Selector::Id(id) => write!(f, "id:{id}"),
        }
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(tier) = s.strip_prefix("tier:") {
            let tier = match tier {
                "T0" => TierLabel::T0,
                "T1" => TierLabel::T1,
                "T2" => TierLabel::T2,
                other => return Err(format!("unknown tier '{other}' in selector")),
            };
            Ok(Selector::Tier(tier))
        } else if let Some(id) = s.strip_prefix("id:") {
            if id.is_empty() {
                return Err("empty id in selector".to_owned());
            }
            Ok(Selector::Id(id.to_owned()))
        } else {
            Err(format!("selector '{s}' must start with 'tier:' or 'id:'"))
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(D::Error::custom)
    }
}

fn default_true() -> bool {
    true
}

/// Allow-list entry permitting a more sensitive identity tier to reach a
/// less sensitive target. Non-interactive entries model machine
/// maintenance channels: they shape policy answers but are not usable as
/// attacker logon sessions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WriteDownException {
    pub identity: Selector,
    pub target: Selector,
    pub purpose: String,
    #[serde(default = "default_true")]
    pub interactive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogonPolicy {
    pub mode: PolicyMode,
    #[serde(default)]
    pub rules: Vec<TierRule>,
    #[serde(default)]
    pub exceptions: Vec<WriteDownException>,
}

impl LogonPolicy {
    /// Copy with only the exceptions an interactive logon can use. The
    /// attack simulator evaluates against this view.
    pub fn interactive_view(&self) -> LogonPolicy {
        LogonPolicy {
            mode: self.mode,
            rules: self.rules.clone(),
            exceptions: self
                .exceptions
                .iter()
                .filter(|e| e.interactive)
                .cloned()
                .collect(),
        }
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("policy serialization cannot fail")
    }
}

/// Where a logon originates: a device inside the graph or the attacker's
/// own external channel (initial access).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogonSource {
    External,
    Device(TierLabel),
}

impl fmt::Display for LogonSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogonSource::External => f.write_str("external"),
            LogonSource::Device(t) => write!(f, "{t}"),
        }
    }
}

/// One logon attempt. Ids are optional: tier-only requests evaluate fine,
/// id selectors in exceptions then simply never match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogonRequest<'a> {
    pub identity_tier: TierLabel,
    pub identity_id: Option<&'a str>,
    pub source: LogonSource,
    pub target_id: Option<&'a str>,
    pub target_tier: TierLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonCode {
    DefaultAllow,
    SameTier,
    ExternalEntry,
    WritedownException,
    IdentityTierMismatch,
    SourceTierViolation,
    /// Synthesized by the simulator when a held Tier 0 credential plus a
    /// compromised domain controller makes every device reachable.
    TotalCompromise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogonDecision {
    pub verdict: Verdict,
    pub reason: ReasonCode,
    pub details: String,
}

impl LogonDecision {
    pub fn allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot generate tiered policy: {} unclassified object(s): {}", .0.len(), .0.join(", "))]
    UnclassifiedObjects(Vec<String>),
    #[error("unclassified {0} in tiered logon evaluation")]
    UnclassifiedInput(&'static str),
    #[error("exception '{purpose}' ({identity} -> {target}) is not a write-down: identity tier {identity_tier} does not strictly dominate target tier {target_tier}")]
    ExceptionDirection {
        purpose: String,
        identity: String,
        target: String,
        identity_tier: TierLabel,
        target_tier: TierLabel,
    },
    #[error("exception selector references unknown object '{0}'")]
    UnknownSelectorId(String),
}

/// The pre-tiering default: every logon is allowed.
pub fn default_policy() -> LogonPolicy {
    LogonPolicy {
        mode: PolicyMode::DefaultFlat,
        rules: Vec::new(),
        exceptions: Vec::new(),
    }
}

/// Build the tiered policy for a fully classified snapshot: one rule
/// record per tier plus validated write-down exceptions. When the
/// snapshot contains a Tier 0 domain controller, two non-interactive
/// credential-maintenance exceptions (T0 to T1, T0 to T2) are added
/// automatically.
pub fn generate_tiered_policy(
    tiered: &TieredSnapshot,
    extra_exceptions: Vec<WriteDownException>,
) -> Result<LogonPolicy, PolicyError> {
    let assignments = tiered.assignments();
    let unclassified = assignments.unclassified_objects();
    if !unclassified.is_empty() {
        return Err(PolicyError::UnclassifiedObjects(unclassified));
    }

    let rules = TierLabel::CLASSIFIED
        .iter()
        .map(|&tier| TierRule {
            tier,
            allow_identity_tiers: vec![tier],
            deny_identity_tiers: TierLabel::CLASSIFIED
                .iter()
                .copied()
                .filter(|&t| t != tier)
                .collect(),
        })
        .collect();

    let mut exceptions = Vec::new();
    let has_t0_dc = tiered.base.devices.iter().any(|d| {
        d.device_class == DeviceClass::DomainController
            && tiered.device_tier(&d.device_id) == Some(TierLabel::T0)
    });
    if has_t0_dc {
        for target in [TierLabel::T1, TierLabel::T2] {
            exceptions.push(WriteDownException {
                identity: Selector::Tier(TierLabel::T0),
                target: Selector::Tier(target),
                purpose: DC_CREDENTIAL_UPDATE.to_owned(),
                interactive: false,
            });
        }
    }

    for exception in extra_exceptions {
        let identity_tier = selector_tier(&exception.identity, tiered, true)?;
        let target_tier = selector_tier(&exception.target, tiered, false)?;
        if !identity_tier.strictly_dominates(target_tier) {
            return Err(PolicyError::ExceptionDirection {
                purpose: exception.purpose.clone(),
                identity: exception.identity.to_string(),
                target: exception.target.to_string(),
                identity_tier,
                target_tier,
            });
        }
        exceptions.push(exception);
    }
    exceptions.sort();
    exceptions.dedup();

    Ok(LogonPolicy {
        mode: PolicyMode::Tiered,
        rules,
        exceptions,
    })
}

fn selector_tier(
    selector: &Selector,
    tiered: &TieredSnapshot,
    identity_side: bool,
) -> Result<TierLabel, PolicyError> {
    match selector {
        Selector::Tier(t) => Ok(*t),
        Selector::Id(id) => {
            let tier = if identity_side {
                tiered.identity_tier(id)
            } else {
                tiered.device_tier(id)
            };
            match tier {
                Some(t) if t.is_classified() => Ok(t),
                Some(_) => Err(PolicyError::UnclassifiedObjects(vec![id.clone()])),
                None => Err(PolicyError::UnknownSelectorId(id.clone())),
            }
        }
    }
}

fn exception_matches(exception: &WriteDownException, req: &LogonRequest<'_>) -> bool {
    let identity_ok = match &exception.identity {
        Selector::Tier(t) => *t == req.identity_tier,
        Selector::Id(id) => req.identity_id == Some(id.as_str()),
    };
    let target_ok = match &exception.target {
        Selector::Tier(t) => *t == req.target_tier,
        Selector::Id(id) => req.target_id == Some(id.as_str()),
    };
    identity_ok && target_ok
}

/// Decide one logon attempt. Flat mode always allows. Tiered mode allows
/// same-tier logons from same-tier sources or from outside (initial
/// access), plus matching write-down exceptions; everything else is
/// denied with the failed check in the reason.
pub fn evaluate_logon(
    policy: &LogonPolicy,
    req: &LogonRequest<'_>,
) -> Result<LogonDecision, PolicyError> {
    if policy.mode == PolicyMode::DefaultFlat {
        return Ok(LogonDecision {
            verdict: Verdict::Allow,
            reason: ReasonCode::DefaultAllow,
            details: "flat policy allows any logon".to_owned(),
        });
    }

    if !req.identity_tier.is_classified() {
        return Err(PolicyError::UnclassifiedInput("identity tier"));
    }
    if !req.target_tier.is_classified() {
        return Err(PolicyError::UnclassifiedInput("target tier"));
    }
    if let LogonSource::Device(t) = req.source {
        if !t.is_classified() {
            return Err(PolicyError::UnclassifiedInput("source tier"));
        }
    }

    if req.identity_tier == req.target_tier {
        return Ok(match req.source {
            LogonSource::External => LogonDecision {
                verdict: Verdict::Allow,
                reason: ReasonCode::ExternalEntry,
                details: format!(
                    "external entry with a {} identity into {}",
                    req.identity_tier, req.target_tier
                ),
            },
            LogonSource::Device(s) if s == req.target_tier => LogonDecision {
                verdict: Verdict::Allow,
                reason: ReasonCode::SameTier,
                details: format!(
                    "{} identity from a {} device into {}",
                    req.identity_tier, s, req.target_tier
                ),
            },
            LogonSource::Device(s) => LogonDecision {
                verdict: Verdict::Deny,
                reason: ReasonCode::SourceTierViolation,
                details: format!(
                    "remote connection from a {} device into {} is not allowed",
                    s, req.target_tier
                ),
            },
        });
    }

    // Cross-tier: only a write-down exception can allow, and only
    // strictly downward.
    for exception in &policy.exceptions {
        if req.identity_tier.strictly_dominates(req.target_tier)
            && exception_matches(exception, req)
        {
            return Ok(LogonDecision {
                verdict: Verdict::Allow,
                reason: ReasonCode::WritedownException,
                details: format!("write-down exception '{}'", exception.purpose),
            });
        }
    }

    Ok(LogonDecision {
        verdict: Verdict::Deny,
        reason: ReasonCode::IdentityTierMismatch,
        details: CROSS_TIER_DENIAL.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::classify_snapshot;
    use crate::model::load_snapshot;

    fn request(
        identity: TierLabel,
        source: LogonSource,
        target: TierLabel,
    ) -> LogonRequest<'static> {
        LogonRequest {
            identity_tier: identity,
            identity_id: None,
            source,
            target_id: None,
            target_tier: target,
        }
    }

    fn tiered_no_exceptions() -> LogonPolicy {
        LogonPolicy {
            mode: PolicyMode::Tiered,
            rules: Vec::new(),
            exceptions: Vec::new(),
        }
    }

    #[test]
    fn flat_allows_everything() {
        let policy = default_policy();
        for identity in TierLabel::CLASSIFIED {
            for target in TierLabel::CLASSIFIED {
                let d = evaluate_logon(
                    &policy,
                    &request(identity, LogonSource::Device(TierLabel::T2), target),
                )
                .unwrap();
                assert!(d.allowed());
                assert_eq!(d.reason, ReasonCode::DefaultAllow);
            }
        }
    }

    #[test]
    fn same_tier_same_source_allowed() {
        let policy = tiered_no_exceptions();
        let d = evaluate_logon(
            &policy,
            &request(TierLabel::T2, LogonSource::Device(TierLabel::T2), TierLabel::T2),
        )
        .unwrap();
        assert!(d.allowed());
        assert_eq!(d.reason, ReasonCode::SameTier);
    }

    #[test]
    fn cross_tier_identity_denied_with_fixed_reason() {
        let policy = tiered_no_exceptions();
        let d = evaluate_logon(
            &policy,
            &request(TierLabel::T2, LogonSource::Device(TierLabel::T2), TierLabel::T1),
        )
        .unwrap();
        assert_eq!(d.verdict, Verdict::Deny);
        assert_eq!(d.reason, ReasonCode::IdentityTierMismatch);
        assert_eq!(d.details, CROSS_TIER_DENIAL);
    }

    #[test]
    fn lower_source_denied_as_source_violation() {
        let policy = tiered_no_exceptions();
        let d = evaluate_logon(
            &policy,
            &request(TierLabel::T1, LogonSource::Device(TierLabel::T2), TierLabel::T1),
        )
        .unwrap();
        assert_eq!(d.verdict, Verdict::Deny);
        assert_eq!(d.reason, ReasonCode::SourceTierViolation);
    }

    #[test]
    fn external_entry_allowed_same_tier_only() {
        let policy = tiered_no_exceptions();
        let ok = evaluate_logon(
            &policy,
            &request(TierLabel::T1, LogonSource::External, TierLabel::T1),
        )
        .unwrap();
        assert_eq!(ok.reason, ReasonCode::ExternalEntry);
        let no = evaluate_logon(
            &policy,
            &request(TierLabel::T2, LogonSource::External, TierLabel::T1),
        )
        .unwrap();
        assert_eq!(no.verdict, Verdict::Deny);
        assert_eq!(no.reason, ReasonCode::IdentityTierMismatch);
    }

    #[test]
    fn unclassified_inputs_error_in_tiered_mode() {
        let policy = tiered_no_exceptions();
        assert!(evaluate_logon(
            &policy,
            &request(TierLabel::Unclassified, LogonSource::External, TierLabel::T2),
        )
        .is_err());
        assert!(evaluate_logon(
            &policy,
            &request(TierLabel::T2, LogonSource::Device(TierLabel::Unclassified), TierLabel::T2),
        )
        .is_err());
    }

    fn dc_snapshot() -> TieredSnapshot {
        let text = concat!(
            "schema_version = 1\n",
            "hardened_baseline = true\n",
            "[[persons]]\nperson_id = \"p1\"\ndisplay_name = \"P One\"\n",
            "[[identities]]\nidentity_id = \"da\"\nperson_id = \"p1\"\nroles = [\"domain-admin\"]\n",
            "[[devices]]\ndevice_id = \"dc-1\"\ndevice_class = \"domain-controller\"\n",
            "[[devices]]\ndevice_id = \"srv-1\"\ndevice_class = \"file-server\"\n",
            "[[devices]]\ndevice_id = \"ws-1\"\ndevice_class = \"workstation\"\n",
        );
        classify_snapshot(&load_snapshot(text).unwrap())
    }

    #[test]
    fn generated_policy_has_dc_maintenance_exceptions() {
        let policy = generate_tiered_policy(&dc_snapshot(), Vec::new()).unwrap();
        assert_eq!(policy.mode, PolicyMode::Tiered);
        assert_eq!(policy.rules.len(), 3);
        assert_eq!(policy.exceptions.len(), 2);
        assert!(policy
            .exceptions
            .iter()
            .all(|e| e.purpose == DC_CREDENTIAL_UPDATE && !e.interactive));
        // The maintenance channel answers Allow for T0 write-down.
        let d = evaluate_logon(
            &policy,
            &request(TierLabel::T0, LogonSource::Device(TierLabel::T0), TierLabel::T2),
        )
        .unwrap();
        assert!(d.allowed());
        assert_eq!(d.reason, ReasonCode::WritedownException);
        // But the interactive view, which the simulator uses, drops it.
        let d = evaluate_logon(
            &policy.interactive_view(),
            &request(TierLabel::T0, LogonSource::Device(TierLabel::T0), TierLabel::T2),
        )
        .unwrap();
        assert_eq!(d.verdict, Verdict::Deny);
    }

    #[test]
    fn no_dc_means_no_auto_exceptions() {
        let text = concat!(
            "schema_version = 1\n",
            "hardened_baseline = true\n",
            "[[devices]]\ndevice_id = \"srv-1\"\ndevice_class = \"file-server\"\n",
        );
        let tiered = classify_snapshot(&load_snapshot(text).unwrap());
        let policy = generate_tiered_policy(&tiered, Vec::new()).unwrap();
        assert!(policy.exceptions.is_empty());
    }

    #[test]
    fn t1_rule_denies_t2_identities() {
        let policy = generate_tiered_policy(&dc_snapshot(), Vec::new()).unwrap();
        let t1_rule = policy.rules.iter().find(|r| r.tier == TierLabel::T1).unwrap();
        assert!(t1_rule.deny_identity_tiers.contains(&TierLabel::T2));
        assert_eq!(t1_rule.allow_identity_tiers, vec![TierLabel::T1]);
    }

    #[test]
    fn upward_exception_rejected() {
        let bad = WriteDownException {
            identity: Selector::Tier(TierLabel::T2),
            target: Selector::Tier(TierLabel::T0),
            purpose: "backdoor".to_owned(),
            interactive: true,
        };
        assert!(matches!(
            generate_tiered_policy(&dc_snapshot(), vec![bad]),
            Err(PolicyError::ExceptionDirection { .. })
        ));
    }

    #[test]
    fn management_server_exception_accepted() {
        let ok = WriteDownException {
            identity: Selector::Tier(TierLabel::T1),
            target: Selector::Tier(TierLabel::T2),
            purpose: "management-agent".to_owned(),
            interactive: true,
        };
        let policy = generate_tiered_policy(&dc_snapshot(), vec![ok]).unwrap();
        let d = evaluate_logon(
            &policy,
            &request(TierLabel::T1, LogonSource::Device(TierLabel::T1), TierLabel::T2),
        )
        .unwrap();
        assert!(d.allowed());
        assert_eq!(d.reason, ReasonCode::WritedownException);
    }

    #[test]
    fn id_selector_exception_matches_only_that_pair() {
        let ex = WriteDownException {
            identity: Selector::Id("da".to_owned()),
            target: Selector::Id("ws-1".to_owned()),
            purpose: "break-glass".to_owned(),
            interactive: true,
        };
        let policy = generate_tiered_policy(&dc_snapshot(), vec![ex]).unwrap();
        let hit = LogonRequest {
            identity_tier: TierLabel::T0,
            identity_id: Some("da"),
            source: LogonSource::Device(TierLabel::T0),
            target_id: Some("ws-1"),
            target_tier: TierLabel::T2,
        };
        assert!(evaluate_logon(&policy, &hit).unwrap().allowed());
        let miss = LogonRequest {
            target_id: Some("srv-1"),
            target_tier: TierLabel::T1,
            ..hit.clone()
        };
        assert_eq!(evaluate_logon(&policy, &miss).unwrap().verdict, Verdict::Deny);
        // Tier-only requests cannot match id selectors.
        let anon = request(TierLabel::T0, LogonSource::Device(TierLabel::T0), TierLabel::T2);
        assert_eq!(evaluate_logon(&policy, &anon).unwrap().verdict, Verdict::Deny);
    }

    #[test]
    fn unknown_selector_id_rejected() {
        let ex = WriteDownException {
            identity: Selector::Id("ghost".to_owned()),
            target: Selector::Tier(TierLabel::T2),
            purpose: "x".to_owned(),
            interactive: true,
        };
        assert!(matches!(
            generate_tiered_policy(&dc_snapshot(), vec![ex]),
            Err(PolicyError::UnknownSelectorId(_))
        ));
    }

    #[test]
    fn unclassified_snapshot_refused() {
        let text = concat!(
            "schema_version = 1\n",
            "hardened_baseline = true\n",
            "[[devices]]\ndevice_id = \"m\"\ndevice_class = \"workstation\"\ndeclared_tier = \"Unclassified\"\n",
        );
        let tiered = classify_snapshot(&load_snapshot(text).unwrap());
        assert!(matches!(
            generate_tiered_policy(&tiered, Vec::new()),
            Err(PolicyError::UnclassifiedObjects(ids)) if ids == vec!["m".to_owned()]
        ));
    }

    #[test]
    fn grid_matches_rule_records() {
        let policy = generate_tiered_policy(&dc_snapshot(), Vec::new()).unwrap();
        let stripped = LogonPolicy {
            exceptions: Vec::new(),
            ..policy.clone()
        };
        for rule in &policy.rules {
            for identity in TierLabel::CLASSIFIED {
                let d = evaluate_logon(
                    &stripped,
                    &request(identity, LogonSource::Device(rule.tier), rule.tier),
                )
                .unwrap();
                let in_allow = rule.allow_identity_tiers.contains(&identity);
                assert_eq!(d.allowed(), in_allow, "{identity} -> {}", rule.tier);
                assert_eq!(
                    rule.deny_identity_tiers.contains(&identity),
                    !in_allow
                );
            }
        }
    }

    #[test]
    fn selector_string_round_trip() {
        for s in ["tier:T0", "tier:T2", "id:ws-desktop-1"] {
            let sel: Selector = s.parse().unwrap();
            assert_eq!(sel.to_string(), s);
        }
        assert!("tier:T9".parse::<Selector>().is_err());
        assert!("device:x".parse::<Selector>().is_err());
        assert!("id:".parse::<Selector>().is_err());
    }

    #[test]
    fn policy_doc_round_trips() {
        let ex = WriteDownException {
            identity: Selector::Tier(TierLabel::T1),
            target: Selector::Id("prn-1".to_owned()),
            purpose: "print-spooler".to_owned(),
            interactive: true,
        };
        let policy = generate_tiered_policy(&dc_snapshot(), vec![ex]).unwrap();
        let text = policy.to_canonical_string();
        let reparsed: LogonPolicy = toml::from_str(&text).unwrap();
        assert_eq!(policy, reparsed);
    }
}
