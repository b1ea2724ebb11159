//! Directory snapshot model: persons, identities, devices, admin rights, and
//! session records, plus parsing, integrity validation, canonical
//! serialization, and content fingerprinting.
//!
//! Snapshots are plain data. After `load_snapshot` they are treated as
//! immutable; every downstream operation (classification, policy, audit,
//! simulation) is a pure function of a snapshot.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub type PersonId = String;
pub type IdentityId = String;
pub type DeviceId = String;
pub type SecretId = String;

/// Current snapshot file schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// Reserved source name used in attack traces for the attacker's own
/// entry channel. No device may use it as an id.
pub const EXTERNAL_SOURCE: &str = "external";

/// Role tags that place an identity in Tier 0 regardless of its edges.
pub const HIGH_RISK_ROLES: [&str; 3] = ["domain-admin", "enterprise-admin", "schema-admin"];

/// Sensitivity tier of a device or identity. Tier 0 is the most sensitive
/// (identity and management plane), Tier 2 the least (endpoints).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TierLabel {
    T0,
    T1,
    T2,
    Unclassified,
}

impl TierLabel {
    /// Numeric tier for classified labels; `None` for `Unclassified`.
    pub fn rank(self) -> Option<u8> {
        match self {
            TierLabel::T0 => Some(0),
            TierLabel::T1 => Some(1),
            TierLabel::T2 => Some(2),
            TierLabel::Unclassified => None,
        }
    }

    /// True for T0/T1/T2.
    pub fn is_classified(self) -> bool {
        self != TierLabel::Unclassified
    }

    /// `self` is at least as sensitive as `other`. False when either side
    /// is unclassified: sensitivity of an unclassified object is unknown.
    pub fn dominates(self, other: TierLabel) -> bool {
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => a <= b,
            _ => false,
        }
    }

    /// `self` is strictly more sensitive than `other`.
    pub fn strictly_dominates(self, other: TierLabel) -> bool {
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        }
    }

    pub const CLASSIFIED: [TierLabel; 3] = [TierLabel::T0, TierLabel::T1, TierLabel::T2];

    pub fn as_str(self) -> &'static str {
        match self {
            TierLabel::T0 => "T0",
            TierLabel::T1 => "T1",
            TierLabel::T2 => "T2",
            TierLabel::Unclassified => "Unclassified",
        }
    }
}

impl fmt::Display for TierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed device taxonomy. Unknown classes are a parse error: failing loud
/// beats guessing a tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceClass {
    DomainController,
    DcManagement,
    ApplicationServer,
    FileServer,
    SharedInfrastructure,
    Workstation,
    Laptop,
    Mobile,
    Printer,
    Kiosk,
    PublicFacing,
}

impl DeviceClass {
    /// Tier implied by the device class alone.
    pub fn default_tier(self) -> TierLabel {
        use DeviceClass::*;
        match self {
            DomainController | DcManagement => TierLabel::T0,
            ApplicationServer | FileServer | SharedInfrastructure => TierLabel::T1,
            Workstation | Laptop | Mobile | Printer | Kiosk | PublicFacing => TierLabel::T2,
        }
    }

    pub fn as_str(self) -> &'static str {
        use DeviceClass::*;
        match self {
            DomainController => "domain-controller",
            DcManagement => "dc-management",
            ApplicationServer => "application-server",
            FileServer => "file-server",
            SharedInfrastructure => "shared-infrastructure",
            Workstation => "workstation",
            Laptop => "laptop",
            Mobile => "mobile",
            Printer => "printer",
            Kiosk => "kiosk",
            PublicFacing => "public-facing",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind of access an identity holds on a device. `Administer` implies
/// logon capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Right {
    Logon,
    Administer,
}

impl fmt::Display for Right {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Right::Logon => "logon",
            Right::Administer => "administer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Person {
    pub person_id: PersonId,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Identity {
    pub identity_id: IdentityId,
    pub person_id: PersonId,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_tier: Option<TierLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_factor_secret_id: Option<SecretId>,
}

impl Identity {
    /// High-risk role tags carried by this identity, sorted.
    pub fn high_risk_roles(&self) -> Vec<&str> {
        self.roles
            .iter()
            .filter(|r| HIGH_RISK_ROLES.contains(&r.as_str()))
            .map(|r| r.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Device {
    pub device_id: DeviceId,
    pub device_class: DeviceClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_tier: Option<TierLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ou_path: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdminRight {
    pub identity_id: IdentityId,
    pub device_id: DeviceId,
    pub right: Right,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub device_id: DeviceId,
    pub identity_id: IdentityId,
    /// True when the credential is recoverable from the device by an
    /// attacker who compromises it.
    pub cached: bool,
}

/// A point-in-time picture of the directory. Field order matters for the
/// canonical serialization: scalars first, then the record lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySnapshot {
    pub schema_version: u32,
    /// Operator assertion that the secure-configuration baseline was
    /// applied before tiering. Never computed; audited when false.
    pub hardened_baseline: bool,
    #[serde(default)]
    pub persons: Vec<Person>,
    #[serde(default)]
    pub identities: Vec<Identity>,
    #[serde(default)]
    pub devices: Vec<Device>,
    #[serde(default)]
    pub admin_rights: Vec<AdminRight>,
    #[serde(default)]
    pub sessions: Vec<SessionRecord>,
}

/// A single failed integrity check, naming the offending record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityFinding {
    pub kind: IntegrityKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrityKind {
    DuplicateId,
    DanglingReference,
    DuplicateEdge,
    ReservedId,
}

impl fmt::Display for IntegrityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrityKind::DuplicateId => "duplicate-id",
            IntegrityKind::DanglingReference => "dangling-reference",
            IntegrityKind::DuplicateEdge => "duplicate-edge",
            IntegrityKind::ReservedId => "reserved-id",
        })
    }
}

impl fmt::Display for IntegrityFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("snapshot parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("snapshot failed integrity validation with {} finding(s)", .0.len())]
    Integrity(Vec<IntegrityFinding>),
    #[error("unknown device id '{0}'")]
    UnknownDevice(DeviceId),
}

impl DirectorySnapshot {
    pub fn person(&self, id: &str) -> Option<&Person> {
        self.persons.iter().find(|p| p.person_id == id)
    }

    pub fn identity(&self, id: &str) -> Option<&Identity> {
        self.identities.iter().find(|i| i.identity_id == id)
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    /// All admin-right edges held by the identity, in canonical order.
    pub fn rights_of(&self, identity_id: &str) -> impl Iterator<Item = &AdminRight> {
        let id = identity_id.to_owned();
        self.admin_rights.iter().filter(move |r| r.identity_id == id)
    }

    /// True when the identity can log on to the device (administer implies
    /// logon).
    pub fn has_logon_edge(&self, identity_id: &str, device_id: &str) -> bool {
        self.admin_rights
            .iter()
            .any(|r| r.identity_id == identity_id && r.device_id == device_id)
    }

    /// True when the identity holds an administer right on the device.
    pub fn has_administer_edge(&self, identity_id: &str, device_id: &str) -> bool {
        self.admin_rights.iter().any(|r| {
            r.identity_id == identity_id && r.device_id == device_id && r.right == Right::Administer
        })
    }

    /// Identities whose credentials an attacker can recover from the
    /// device: exactly the sessions with `cached = true`.
    pub fn cached_credentials_on(
        &self,
        device_id: &str,
    ) -> Result<BTreeSet<IdentityId>, ModelError> {
        if self.device(device_id).is_none() {
            return Err(ModelError::UnknownDevice(device_id.to_owned()));
        }
        Ok(self
            .sessions
            .iter()
            .filter(|s| s.device_id == device_id && s.cached)
            .map(|s| s.identity_id.clone())
            .collect())
    }

    /// Check every type invariant. Empty result iff the snapshot is
    /// internally consistent; one finding per violation, in scan order.
    pub fn validate(&self) -> Vec<IntegrityFinding> {
        let mut findings = Vec::new();
        let mut push = |kind: IntegrityKind, message: String| {
            findings.push(IntegrityFinding { kind, message });
        };

        let mut person_ids = BTreeSet::new();
        for p in &self.persons {
            if !person_ids.insert(p.person_id.as_str()) {
                push(
                    IntegrityKind::DuplicateId,
                    format!("person '{}' defined more than once", p.person_id),
                );
            }
        }
        let mut identity_ids = BTreeSet::new();
        for i in &self.identities {
            if !identity_ids.insert(i.identity_id.as_str()) {
                push(
                    IntegrityKind::DuplicateId,
                    format!("identity '{}' defined more than once", i.identity_id),
                );
            }
        }
        let mut device_ids = BTreeSet::new();
        for d in &self.devices {
            if !device_ids.insert(d.device_id.as_str()) {
                push(
                    IntegrityKind::DuplicateId,
                    format!("device '{}' defined more than once", d.device_id),
                );
            }
            if d.device_id == EXTERNAL_SOURCE {
                push(
                    IntegrityKind::ReservedId,
                    format!(
                        "device id '{}' is reserved for the attacker entry channel",
                        EXTERNAL_SOURCE
                    ),
                );
            }
        }
        // Identity and device ids share the object-id namespace used by
        // tier maps and OU plans; a collision would make those ambiguous.
        for id in identity_ids.intersection(&device_ids) {
            push(
                IntegrityKind::DuplicateId,
                format!("object id '{id}' used for both an identity and a device"),
            );
        }

        for i in &self.identities {
            if !person_ids.contains(i.person_id.as_str()) {
                push(
                    IntegrityKind::DanglingReference,
                    format!(
                        "identity '{}' references unknown person '{}'",
                        i.identity_id, i.person_id
                    ),
                );
            }
        }
        let mut seen_edges = BTreeSet::new();
        for r in &self.admin_rights {
            if !identity_ids.contains(r.identity_id.as_str()) {
                push(
                    IntegrityKind::DanglingReference,
                    format!(
                        "admin right ({}, {}, {}) references unknown identity '{}'",
                        r.identity_id, r.device_id, r.right, r.identity_id
                    ),
                );
            }
            if !device_ids.contains(r.device_id.as_str()) {
                push(
                    IntegrityKind::DanglingReference,
                    format!(
                        "admin right ({}, {}, {}) references unknown device '{}'",
                        r.identity_id, r.device_id, r.right, r.device_id
                    ),
                );
            }
            if !seen_edges.insert((r.identity_id.as_str(), r.device_id.as_str(), r.right)) {
                push(
                    IntegrityKind::DuplicateEdge,
                    format!(
                        "admin right ({}, {}, {}) listed more than once",
                        r.identity_id, r.device_id, r.right
                    ),
                );
            }
        }
        for s in &self.sessions {
            if !device_ids.contains(s.device_id.as_str()) {
                push(
                    IntegrityKind::DanglingReference,
                    format!(
                        "session (device '{}', identity '{}') references unknown device '{}'",
                        s.device_id, s.identity_id, s.device_id
                    ),
                );
            }
            if !identity_ids.contains(s.identity_id.as_str()) {
                push(
                    IntegrityKind::DanglingReference,
                    format!(
                        "session (device '{}', identity '{}') references unknown identity '{}'",
                        s.device_id, s.identity_id, s.identity_id
                    ),
                );
            }
        }
        findings
    }

    /// Sort every record list into the canonical order. Two snapshots with
    /// the same content canonicalize to identical values.
    pub fn canonicalize(&mut self) {
        self.persons.sort_by(|a, b| a.person_id.cmp(&b.person_id));
        self.identities
            .sort_by(|a, b| a.identity_id.cmp(&b.identity_id));
        self.devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        self.admin_rights.sort();
        self.sessions.sort();
    }

    /// Canonical serialized form: sorted records, deterministic key order.
    pub fn to_canonical_string(&self) -> String {
        let mut copy = self.clone();
        copy.canonicalize();
        toml::to_string(&copy).expect("snapshot serialization cannot fail")
    }

    /// Hex SHA-256 of the canonical serialization. Stable content id used
    /// by audit reports.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// Tier counts keyed by label string; handy for summaries.
    pub fn object_counts(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("persons", self.persons.len()),
            ("identities", self.identities.len()),
            ("devices", self.devices.len()),
            ("admin_rights", self.admin_rights.len()),
            ("sessions", self.sessions.len()),
        ])
    }
}

/// Parse, validate, and canonicalize a snapshot file.
pub fn load_snapshot(bytes: &str) -> Result<DirectorySnapshot, ModelError> {
    let mut snapshot: DirectorySnapshot =
        toml::from_str(bytes).map_err(|e| ModelError::Parse(e.to_string()))?;
    if snapshot.schema_version != SCHEMA_VERSION {
        return Err(ModelError::SchemaVersion {
            found: snapshot.schema_version,
        });
    }
    let findings = snapshot.validate();
    if !findings.is_empty() {
        return Err(ModelError::Integrity(findings));
    }
    snapshot.canonicalize();
    Ok(snapshot)
}
