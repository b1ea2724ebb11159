//! Attack simulation: credential harvest plus lateral movement to a least
//! fixpoint, under a chosen logon policy.
//!
//! The attacker model: the entry channel that delivered the foothold
//! stays open, so any held credential can be replayed from outside
//! against its own tier; compromising a device yields the credentials
//! cached on it (all of them by default, or only under a held administer
//! right in the strict model); and a held Tier 0 credential combined with
//! a compromised domain controller is game over for every device. The
//! fixpoint is monotone and order-independent; iteration follows sorted
//! ids so traces are reproducible byte for byte.

use crate::classify::TierAssignments;
use crate::model::{
    DeviceClass, DeviceId, DirectorySnapshot, IdentityId, TierLabel, EXTERNAL_SOURCE,
};
use crate::policy::{
    evaluate_logon, LogonDecision, LogonPolicy, LogonRequest, LogonSource, PolicyError,
    PolicyMode, ReasonCode, Verdict,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

/// The attacker's initial position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Foothold {
    pub entry_device: DeviceId,
    pub credentials: BTreeSet<IdentityId>,
    /// Free-form tag describing how entry happened (phishing, iot, ...).
    pub vector: String,
}

impl Foothold {
    pub fn new(entry_device: impl Into<DeviceId>, credentials: &[&str], vector: &str) -> Self {
        Foothold {
            entry_device: entry_device.into(),
            credentials: credentials.iter().map(|c| (*c).to_owned()).collect(),
            vector: vector.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Restrict harvesting to devices where the attacker holds an
    /// administer-capable credential. Default is the pessimistic model:
    /// compromise alone exposes every cached credential.
    pub strict_harvest: bool,
    /// Record denied lateral attempts in the trace (once per
    /// credential/target pair). They never change state.
    pub record_attempts: bool,
}

/// One state change (or, for denied laterals at verbose trace level, one
/// recorded attempt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Move {
    Harvest {
        device: DeviceId,
        credentials: BTreeSet<IdentityId>,
    },
    Lateral {
        credential: IdentityId,
        /// Device id, or "external" for the attacker's entry channel.
        source: String,
        target: DeviceId,
        decision: LogonDecision,
    },
}

impl Move {
    pub fn is_allowed_lateral(&self) -> bool {
        matches!(self, Move::Lateral { decision, .. } if decision.allowed())
    }
}

/// Attacker possession during and after a run. Sets only grow.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttackerState {
    pub compromised: BTreeSet<DeviceId>,
    pub harvested: BTreeSet<IdentityId>,
    pub trace: Vec<Move>,
    pub total_compromise: bool,
}

/// Final result of a simulation run, in serializable form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackOutcome {
    pub entry_device: DeviceId,
    pub entry_vector: String,
    pub foothold_tier: TierLabel,
    pub tier0_reached: bool,
    /// A compromised device sits in a tier strictly more sensitive than
    /// the foothold device's tier.
    pub escalated: bool,
    pub total_compromise: bool,
    pub compromised: BTreeSet<DeviceId>,
    pub harvested: BTreeSet<IdentityId>,
    /// Compromised device count per tier label, absent tiers omitted.
    pub tier_summary: BTreeMap<String, usize>,
    pub trace: Vec<Move>,
}

impl AttackOutcome {
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("outcome serialization cannot fail")
    }
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("unknown entry device '{0}'")]
    UnknownEntryDevice(DeviceId),
    #[error("unknown initial credential '{0}'")]
    UnknownCredential(IdentityId),
    #[error("tiered simulation requires fully classified objects; unclassified: {}", .0.join(", "))]
    Unclassified(Vec<String>),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

struct Sim<'a> {
    snapshot: &'a DirectorySnapshot,
    policy: LogonPolicy,
    tiers: &'a TierAssignments,
    device_order: Vec<DeviceId>,
}

impl<'a> Sim<'a> {
    fn new(
        snapshot: &'a DirectorySnapshot,
        policy: &LogonPolicy,
        tiers: &'a TierAssignments,
        foothold: &Foothold,
    ) -> Result<Self, SimulateError> {
        if snapshot.device(&foothold.entry_device).is_none() {
            return Err(SimulateError::UnknownEntryDevice(
                foothold.entry_device.clone(),
            ));
        }
        for cred in &foothold.credentials {
            if snapshot.identity(cred).is_none() {
                return Err(SimulateError::UnknownCredential(cred.clone()));
            }
        }
        if policy.mode == PolicyMode::Tiered {
            let mut unclassified: Vec<String> = snapshot
                .devices
                .iter()
                .map(|d| d.device_id.clone())
                .filter(|d| !self_tier(tiers.device_tier(d)).is_classified())
                .chain(
                    snapshot
                        .identities
                        .iter()
                        .map(|i| i.identity_id.clone())
                        .filter(|i| !self_tier(tiers.identity_tier(i)).is_classified()),
                )
                .collect();
            unclassified.sort();
            if !unclassified.is_empty() {
                return Err(SimulateError::Unclassified(unclassified));
            }
        }
        let mut device_order: Vec<DeviceId> =
            snapshot.devices.iter().map(|d| d.device_id.clone()).collect();
        device_order.sort();
        Ok(Sim {
            snapshot,
            policy: policy.interactive_view(),
            tiers,
            device_order,
        })
    }

    fn device_tier(&self, id: &str) -> TierLabel {
        self_tier(self.tiers.device_tier(id))
    }

    fn identity_tier(&self, id: &str) -> TierLabel {
        self_tier(self.tiers.identity_tier(id))
    }

    fn request<'r>(
        &self,
        credential: &'r str,
        source: LogonSource,
        target: &'r str,
    ) -> LogonRequest<'r> {
        LogonRequest {
            identity_tier: self.identity_tier(credential),
            identity_id: Some(credential),
            source,
            target_id: Some(target),
            target_tier: self.device_tier(target),
        }
    }

    /// Decide a lateral for `credential` into `target`, choosing a source.
    /// Preference: the device the credential came from, then the other
    /// compromised devices in sorted order, then the external channel.
    /// When nothing allows, the preferred source's denial is returned.
    fn decide(
        &self,
        credential: &str,
        target: &str,
        preferred: &str,
        compromised: &BTreeSet<DeviceId>,
    ) -> Result<(String, LogonDecision), SimulateError> {
        let mut first_denial: Option<(String, LogonDecision)> = None;
        let mut try_source = |source_id: &str,
                              source: LogonSource,
                              first_denial: &mut Option<(String, LogonDecision)>|
         -> Result<Option<(String, LogonDecision)>, SimulateError> {
            let decision = evaluate_logon(&self.policy, &self.request(credential, source, target))?;
            if decision.allowed() {
                Ok(Some((source_id.to_owned(), decision)))
            } else {
                if first_denial.is_none() {
                    *first_denial = Some((source_id.to_owned(), decision));
                }
                Ok(None)
            }
        };

        let preferred_source = LogonSource::Device(self.device_tier(preferred));
        if let Some(hit) = try_source(preferred, preferred_source, &mut first_denial)? {
            return Ok(hit);
        }
        for source in compromised.iter().filter(|s| s.as_str() != preferred) {
            let tier = LogonSource::Device(self.device_tier(source));
            if let Some(hit) = try_source(source, tier, &mut first_denial)? {
                return Ok(hit);
            }
        }
        if let Some(hit) = try_source(EXTERNAL_SOURCE, LogonSource::External, &mut first_denial)? {
            return Ok(hit);
        }
        Ok(first_denial.expect("at least the preferred source was tried"))
    }

    fn can_harvest(&self, device: &str, harvested: &BTreeSet<IdentityId>, strict: bool) -> bool {
        !strict
            || harvested
                .iter()
                .any(|c| self.snapshot.has_administer_edge(c, device))
    }

    fn total_condition(
        &self,
        compromised: &BTreeSet<DeviceId>,
        harvested: &BTreeSet<IdentityId>,
    ) -> Option<(DeviceId, IdentityId)> {
        let dc = compromised.iter().find(|d| {
            self.snapshot
                .device(d)
                .map_or(false, |dev| dev.device_class == DeviceClass::DomainController)
        })?;
        let cred = harvested
            .iter()
            .find(|c| self.identity_tier(c) == TierLabel::T0)?;
        Some((dc.clone(), cred.clone()))
    }

    fn total_compromise_decision(&self) -> LogonDecision {
        LogonDecision {
            verdict: Verdict::Allow,
            reason: ReasonCode::TotalCompromise,
            details: "attacker controls the directory and mints identities at will".to_owned(),
        }
    }
}

fn self_tier(tier: Option<TierLabel>) -> TierLabel {
    tier.unwrap_or(TierLabel::Unclassified)
}

/// Run the harvest/lateral fixpoint from the foothold and summarize.
pub fn simulate(
    snapshot: &DirectorySnapshot,
    policy: &LogonPolicy,
    tiers: &TierAssignments,
    foothold: &Foothold,
    opts: &SimOptions,
) -> Result<AttackOutcome, SimulateError> {
    let sim = Sim::new(snapshot, policy, tiers, foothold)?;
    let mut state = AttackerState {
        compromised: BTreeSet::from([foothold.entry_device.clone()]),
        harvested: foothold.credentials.clone(),
        trace: Vec::new(),
        total_compromise: false,
    };
    let mut harvest_origin: BTreeMap<IdentityId, DeviceId> = BTreeMap::new();
    let mut denied_seen: BTreeSet<(IdentityId, DeviceId)> = BTreeSet::new();

    loop {
        let mut changed = false;

        let current: Vec<DeviceId> = state.compromised.iter().cloned().collect();
        for device in &current {
            if !sim.can_harvest(device, &state.harvested, opts.strict_harvest) {
                continue;
            }
            let cached = snapshot
                .cached_credentials_on(device)
                .expect("compromised device exists");
            let new: BTreeSet<IdentityId> =
                cached.difference(&state.harvested).cloned().collect();
            if !new.is_empty() {
                for cred in &new {
                    harvest_origin.insert(cred.clone(), device.clone());
                }
                state.harvested.extend(new.iter().cloned());
                state.trace.push(Move::Harvest {
                    device: device.clone(),
                    credentials: new,
                });
                changed = true;
            }
        }

        let held: Vec<IdentityId> = state.harvested.iter().cloned().collect();
        for credential in &held {
            for target in &sim.device_order {
                if state.compromised.contains(target)
                    || !snapshot.has_logon_edge(credential, target)
                {
                    continue;
                }
                let preferred = harvest_origin
                    .get(credential)
                    .cloned()
                    .unwrap_or_else(|| foothold.entry_device.clone());
                let (source, decision) =
                    sim.decide(credential, target, &preferred, &state.compromised)?;
                if decision.allowed() {
                    state.compromised.insert(target.clone());
                    state.trace.push(Move::Lateral {
                        credential: credential.clone(),
                        source,
                        target: target.clone(),
                        decision,
                    });
                    changed = true;
                } else if opts.record_attempts
                    && denied_seen.insert((credential.clone(), target.clone()))
                {
                    state.trace.push(Move::Lateral {
                        credential: credential.clone(),
                        source,
                        target: target.clone(),
                        decision,
                    });
                }
            }
        }

        if !state.total_compromise {
            if let Some((dc, cred)) = sim.total_condition(&state.compromised, &state.harvested) {
                state.total_compromise = true;
                changed = true;
                for target in &sim.device_order {
                    if state.compromised.contains(target) {
                        continue;
                    }
                    state.compromised.insert(target.clone());
                    state.trace.push(Move::Lateral {
                        credential: cred.clone(),
                        source: dc.clone(),
                        target: target.clone(),
                        decision: sim.total_compromise_decision(),
                    });
                }
            }
        }

        if !changed {
            break;
        }
    }

    let foothold_tier = sim.device_tier(&foothold.entry_device);
    let mut tier_summary: BTreeMap<String, usize> = BTreeMap::new();
    for device in &state.compromised {
        *tier_summary
            .entry(sim.device_tier(device).as_str().to_owned())
            .or_insert(0) += 1;
    }
    let tier0_reached = state
        .compromised
        .iter()
        .any(|d| sim.device_tier(d) == TierLabel::T0);
    let escalated = state
        .compromised
        .iter()
        .any(|d| sim.device_tier(d).strictly_dominates(foothold_tier));

    Ok(AttackOutcome {
        entry_device: foothold.entry_device.clone(),
        entry_vector: foothold.vector.clone(),
        foothold_tier,
        tier0_reached,
        escalated,
        total_compromise: state.total_compromise,
        compromised: state.compromised,
        harvested: state.harvested,
        tier_summary,
        trace: state.trace,
    })
}

/// Minimum-length sequence of state-changing moves ending on a device
/// strictly more sensitive than the foothold tier, or `None` when no
/// escalation exists. Breadth-first over (compromised, harvested) states,
/// sorted-id tie-breaking; intended for fixture-scale scenario analysis.
pub fn shortest_escalation_path(
    snapshot: &DirectorySnapshot,
    policy: &LogonPolicy,
    tiers: &TierAssignments,
    foothold: &Foothold,
    opts: &SimOptions,
) -> Result<Option<Vec<Move>>, SimulateError> {
    let sim = Sim::new(snapshot, policy, tiers, foothold)?;
    let foothold_tier = sim.device_tier(&foothold.entry_device);
    if foothold_tier == TierLabel::T0 {
        return Ok(None);
    }

    type State = (BTreeSet<DeviceId>, BTreeSet<IdentityId>);
    let start: State = (
        BTreeSet::from([foothold.entry_device.clone()]),
        foothold.credentials.clone(),
    );
    let mut visited: BTreeSet<State> = BTreeSet::from([start.clone()]);
    let mut queue: VecDeque<(State, Vec<Move>)> = VecDeque::from([(start, Vec::new())]);

    while let Some(((devices, creds), path)) = queue.pop_front() {
        let mut successors: Vec<(State, Move)> = Vec::new();

        for device in &devices {
            if !sim.can_harvest(device, &creds, opts.strict_harvest) {
                continue;
            }
            let cached = snapshot
                .cached_credentials_on(device)
                .expect("device exists");
            let new: BTreeSet<IdentityId> = cached.difference(&creds).cloned().collect();
            if !new.is_empty() {
                let mut next_creds = creds.clone();
                next_creds.extend(new.iter().cloned());
                successors.push((
                    (devices.clone(), next_creds),
                    Move::Harvest {
                        device: device.clone(),
                        credentials: new,
                    },
                ));
            }
        }

        let total = sim.total_condition(&devices, &creds);
        for credential in &creds {
            for target in &sim.device_order {
                if devices.contains(target) || !snapshot.has_logon_edge(credential, target) {
                    continue;
                }
                let (source, decision) =
                    sim.decide(credential, target, &foothold.entry_device, &devices)?;
                if !decision.allowed() {
                    continue;
                }
                let mut next_devices = devices.clone();
                next_devices.insert(target.clone());
                successors.push((
                    (next_devices, creds.clone()),
                    Move::Lateral {
                        credential: credential.clone(),
                        source,
                        target: target.clone(),
                        decision,
                    },
                ));
            }
        }
        if let Some((dc, cred)) = &total {
            for target in &sim.device_order {
                if devices.contains(target) {
                    continue;
                }
                let mut next_devices = devices.clone();
                next_devices.insert(target.clone());
                successors.push((
                    (next_devices, creds.clone()),
                    Move::Lateral {
                        credential: cred.clone(),
                        source: dc.clone(),
                        target: target.clone(),
                        decision: sim.total_compromise_decision(),
                    },
                ));
            }
        }

        for (state, mv) in successors {
            let reached_goal = matches!(
                &mv,
                Move::Lateral { target, .. }
                    if sim.device_tier(target).strictly_dominates(foothold_tier)
            );
            let mut next_path = path.clone();
            next_path.push(mv);
            if reached_goal {
                return Ok(Some(next_path));
            }
            if visited.insert(state.clone()) {
                queue.push_back((state, next_path));
            }
        }
    }
    Ok(None)
}
