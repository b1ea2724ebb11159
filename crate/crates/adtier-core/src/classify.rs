//! Tier classification: assign every device and identity a tier, derive OU
//! placements, and plan per-person account provisioning.
//!
//! Devices classify first (declaration, then device class, then promotion
//! through live management sessions), identities second (declaration, then
//! high-risk roles, then the most sensitive tier they can reach). The
//! snapshot-level pass is total: objects that cannot be pinned to a tier
//! come back as `Unclassified` and are surfaced by the audit module rather
//! than failing the pipeline.

use crate::model::{DeviceId, DirectorySnapshot, IdentityId, PersonId, Right, TierLabel};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const RULE_DECLARED: &str = "declared";
pub const RULE_DEVICE_CLASS: &str = "device-class";
pub const RULE_PROMOTED: &str = "promoted-by-management";
pub const RULE_HIGH_RISK_ROLE: &str = "high-risk-role";
pub const RULE_MOST_SENSITIVE_ACCESS: &str = "most-sensitive-access";
pub const RULE_DEFAULT_USER: &str = "default-user";
pub const RULE_UNCLASSIFIED_DEPENDENCY: &str = "unclassified-dependency";

/// The two tier maps, separated from the full [`TieredSnapshot`] so the
/// simulator and policy generator can take just what they need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierAssignments {
    pub device_tiers: BTreeMap<DeviceId, TierLabel>,
    pub identity_tiers: BTreeMap<IdentityId, TierLabel>,
}

impl TierAssignments {
    pub fn device_tier(&self, id: &str) -> Option<TierLabel> {
        self.device_tiers.get(id).copied()
    }

    pub fn identity_tier(&self, id: &str) -> Option<TierLabel> {
        self.identity_tiers.get(id).copied()
    }

    /// Ids of all objects still lacking a concrete tier, sorted.
    pub fn unclassified_objects(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .device_tiers
            .iter()
            .chain(self.identity_tiers.iter())
            .filter(|(_, t)| !t.is_classified())
            .map(|(id, _)| id.clone())
            .collect();
        out.sort();
        out
    }

    pub fn all_classified(&self) -> bool {
        self.device_tiers.values().all(|t| t.is_classified())
            && self.identity_tiers.values().all(|t| t.is_classified())
    }

    /// Copy with every `Unclassified` entry rewritten to T2, the most
    /// exposed tier. Used by the CLI's opt-in assume-unclassified-t2 mode.
    pub fn assume_unclassified_t2(&self) -> TierAssignments {
        let fix = |m: &BTreeMap<String, TierLabel>| {
            m.iter()
                .map(|(k, v)| {
                    let v = if v.is_classified() { *v } else { TierLabel::T2 };
                    (k.clone(), v)
                })
                .collect()
        };
        TierAssignments {
            device_tiers: fix(&self.device_tiers),
            identity_tiers: fix(&self.identity_tiers),
        }
    }
}

/// A snapshot plus everything classification derived from it. Serializes
/// to the same structured-text family as snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieredSnapshot {
    pub base: DirectorySnapshot,
    pub device_tiers: BTreeMap<DeviceId, TierLabel>,
    pub identity_tiers: BTreeMap<IdentityId, TierLabel>,
    /// OU path per classified object: tier OU, then an object-kind OU.
    pub ou_plan: BTreeMap<String, Vec<String>>,
    /// Rule that produced each object's tier.
    pub rationale: BTreeMap<String, String>,
}

impl TieredSnapshot {
    pub fn assignments(&self) -> TierAssignments {
        TierAssignments {
            device_tiers: self.device_tiers.clone(),
            identity_tiers: self.identity_tiers.clone(),
        }
    }

    pub fn device_tier(&self, id: &str) -> Option<TierLabel> {
        self.device_tiers.get(id).copied()
    }

    pub fn identity_tier(&self, id: &str) -> Option<TierLabel> {
        self.identity_tiers.get(id).copied()
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("tiered snapshot serialization cannot fail")
    }
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("unknown device '{0}'")]
    UnknownDevice(DeviceId),
    #[error("unknown identity '{0}'")]
    UnknownIdentity(IdentityId),
    #[error("identity '{identity}' references device '{device}' which has no classified tier")]
    UnclassifiedDevice {
        identity: IdentityId,
        device: DeviceId,
    },
}

/// Tier of a single device under the full rule set (declaration, class
/// default, promotion), with the rule that decided it.
pub fn classify_device(
    device_id: &str,
    snapshot: &DirectorySnapshot,
) -> Result<(TierLabel, &'static str), ClassifyError> {
    if snapshot.device(device_id).is_none() {
        return Err(ClassifyError::UnknownDevice(device_id.to_owned()));
    }
    let pass = device_pass(snapshot, None);
    Ok(pass[device_id])
}

/// Tier of a single identity given the device tiers. Strict contract:
/// referencing an unclassified device is an error here, unlike the
/// snapshot-level pass which degrades to `Unclassified`.
pub fn classify_identity(
    identity_id: &str,
    snapshot: &DirectorySnapshot,
    device_tiers: &BTreeMap<DeviceId, TierLabel>,
) -> Result<(TierLabel, &'static str), ClassifyError> {
    let identity = snapshot
        .identity(identity_id)
        .ok_or_else(|| ClassifyError::UnknownIdentity(identity_id.to_owned()))?;
    let (tier, rule) = identity_rule(identity_id, snapshot, device_tiers, true);
    if rule == RULE_UNCLASSIFIED_DEPENDENCY {
        let device = snapshot
            .rights_of(identity_id)
            .map(|r| r.device_id.clone())
            .find(|d| !device_tiers.get(d).map_or(false, |t| t.is_classified()))
            .unwrap_or_default();
        return Err(ClassifyError::UnclassifiedDevice {
            identity: identity.identity_id.clone(),
            device,
        });
    }
    Ok((tier, rule))
}

/// Classify every object in the snapshot. Total on valid snapshots:
/// objects without a derivable tier are mapped to `Unclassified` and left
/// for the audit to flag.
pub fn classify_snapshot(snapshot: &DirectorySnapshot) -> TieredSnapshot {
    let devices = device_pass(snapshot, None);
    let mut device_tiers = BTreeMap::new();
    let mut rationale = BTreeMap::new();
    let mut ou_plan = BTreeMap::new();
    for (id, (tier, rule)) in &devices {
        device_tiers.insert(id.clone(), *tier);
        rationale.insert(id.clone(), (*rule).to_owned());
        if let Some(rank) = tier.rank() {
            ou_plan.insert(
                id.clone(),
                vec![format!("Tier{rank}"), "Devices".to_owned()],
            );
        }
    }

    let mut identity_tiers = BTreeMap::new();
    for identity in &snapshot.identities {
        let (tier, rule) = identity_rule(&identity.identity_id, snapshot, &device_tiers, true);
        identity_tiers.insert(identity.identity_id.clone(), tier);
        rationale.insert(identity.identity_id.clone(), rule.to_owned());
        if let Some(rank) = tier.rank() {
            ou_plan.insert(
                identity.identity_id.clone(),
                vec![format!("Tier{rank}"), "Identities".to_owned()],
            );
        }
    }

    TieredSnapshot {
        base: snapshot.clone(),
        device_tiers,
        identity_tiers,
        ou_plan,
        rationale,
    }
}

/// Device tiers with rules. `ignore_declared_of` recomputes as if that one
/// device had no declaration; the audit uses it to spot declarations that
/// hide a more sensitive computed tier.
fn device_pass(
    snapshot: &DirectorySnapshot,
    ignore_declared_of: Option<&str>,
) -> BTreeMap<DeviceId, (TierLabel, &'static str)> {
    let mut tiers: BTreeMap<DeviceId, (TierLabel, &'static str)> = BTreeMap::new();
    for device in &snapshot.devices {
        let declared = if Some(device.device_id.as_str()) == ignore_declared_of {
            None
        } else {
            device.declared_tier
        };
        let entry = match declared {
            Some(t) => (t, RULE_DECLARED),
            None => (device.device_class.default_tier(), RULE_DEVICE_CLASS),
        };
        tiers.insert(device.device_id.clone(), entry);
    }

    // Promotion fixpoint: a device hosting a live (non-cached) session of
    // an identity that administers a more sensitive device is pulled up to
    // that tier. Cached-only presence never promotes; a cached privileged
    // credential on a lesser device is a violation, not management reach.
    loop {
        let mut changed = false;
        for device in &snapshot.devices {
            let declared = if Some(device.device_id.as_str()) == ignore_declared_of {
                None
            } else {
                device.declared_tier
            };
            if declared.is_some() {
                continue;
            }
            let current = tiers[&device.device_id].0;
            let mut best: Option<TierLabel> = None;
            for session in snapshot
                .sessions
                .iter()
                .filter(|s| s.device_id == device.device_id && !s.cached)
            {
                for right in snapshot
                    .admin_rights
                    .iter()
                    .filter(|r| r.identity_id == session.identity_id && r.right == Right::Administer)
                {
                    let target = tiers[&right.device_id].0;
                    if target.strictly_dominates(current)
                        && best.map_or(true, |b| target.strictly_dominates(b))
                    {
                        best = Some(target);
                    }
                }
            }
            if let Some(promoted) = best {
                tiers.insert(device.device_id.clone(), (promoted, RULE_PROMOTED));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    tiers
}

/// Identity rule, shared by the strict and total paths.
/// `honor_declared` is false only when the audit recomputes a tier as if
/// the identity had no declaration.
fn identity_rule(
    identity_id: &str,
    snapshot: &DirectorySnapshot,
    device_tiers: &BTreeMap<DeviceId, TierLabel>,
    honor_declared: bool,
) -> (TierLabel, &'static str) {
    let identity = snapshot.identity(identity_id).expect("identity exists");
    if honor_declared {
        if let Some(t) = identity.declared_tier {
            return (t, RULE_DECLARED);
        }
    }
    if !identity.high_risk_roles().is_empty() {
        return (TierLabel::T0, RULE_HIGH_RISK_ROLE);
    }
    let mut targets: Vec<TierLabel> = Vec::new();
    for right in snapshot.rights_of(identity_id) {
        match device_tiers.get(&right.device_id).copied() {
            Some(t) if t.is_classified() => targets.push(t),
            _ => return (TierLabel::Unclassified, RULE_UNCLASSIFIED_DEPENDENCY),
        }
    }
    match targets.into_iter().min() {
        Some(most_sensitive) => (most_sensitive, RULE_MOST_SENSITIVE_ACCESS),
        None => (TierLabel::T2, RULE_DEFAULT_USER),
    }
}

/// Reference to a classified object for declaration cross-checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectRef<'a> {
    Device(&'a str),
    Identity(&'a str),
}

/// The tier an object would receive if its own declaration were absent
/// (other declarations stay in force). Used to detect declarations that
/// understate sensitivity.
pub fn computed_tier_sans_declaration(
    snapshot: &DirectorySnapshot,
    object: ObjectRef<'_>,
) -> (TierLabel, &'static str) {
    match object {
        ObjectRef::Device(id) => device_pass(snapshot, Some(id))[id],
        ObjectRef::Identity(id) => {
            let devices = device_pass(snapshot, None);
            let tiers: BTreeMap<DeviceId, TierLabel> =
                devices.into_iter().map(|(k, (t, _))| (k, t)).collect();
            identity_rule(id, snapshot, &tiers, false)
        }
    }
}

/// Whether a person already has an identity in a tier or needs a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanAction {
    Exists,
    Create,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub tier: TierLabel,
    pub action: PlanAction,
}

/// Per-person account plan: one entry per tier the person needs, most
/// sensitive first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisioningPlan {
    pub persons: BTreeMap<PersonId, Vec<PlanEntry>>,
}

/// Compute which tiers each person needs an account in, and whether one
/// already exists there. A single identity spanning several tiers yields
/// `create` entries for the extra tiers; splitting is required, deletion
/// never planned.
pub fn plan_account_provisioning(tiered: &TieredSnapshot) -> ProvisioningPlan {
    let snapshot = &tiered.base;
    let mut persons: BTreeMap<PersonId, Vec<PlanEntry>> = BTreeMap::new();
    for person in &snapshot.persons {
        let mut needed: BTreeSet<TierLabel> = BTreeSet::new();
        let mut covered: BTreeSet<TierLabel> = BTreeSet::new();
        for identity in snapshot
            .identities
            .iter()
            .filter(|i| i.person_id == person.person_id)
        {
            if let Some(t) = tiered.identity_tier(&identity.identity_id) {
                if t.is_classified() {
                    needed.insert(t);
                    covered.insert(t);
                }
            }
            for right in snapshot.rights_of(&identity.identity_id) {
                if let Some(t) = tiered.device_tier(&right.device_id) {
                    if t.is_classified() {
                        needed.insert(t);
                    }
                }
            }
        }
        let entries = needed
            .into_iter()
            .map(|tier| PlanEntry {
                tier,
                action: if covered.contains(&tier) {
                    PlanAction::Exists
                } else {
                    PlanAction::Create
                },
            })
            .collect();
        persons.insert(person.person_id.clone(), entries);
    }
    ProvisioningPlan { persons }
}
