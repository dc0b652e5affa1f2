//! The abstract partition policy: partitions, the access-rights lattice, the
//! `<P, phi, alpha, pi>` tuple, validation, and the mapping from partitions to
//! protection keys.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of protection keys the hardware model exposes.
pub const PROTECTION_KEY_COUNT: u8 = 16;
/// Key reserved for runtime and unpartitioned memory.
pub const RUNTIME_KEY: ProtectionKey = ProtectionKey(0);
/// Largest number of application partitions a program may declare.
pub const MAX_APPLICATION_PARTITIONS: usize = PROTECTION_KEY_COUNT as usize - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("{declared} partitions declared but only {MAX_APPLICATION_PARTITIONS} protection keys are available")]
    KeyExhaustion { declared: usize },
    #[error("partition label {0} declared more than once")]
    DuplicatePartition(PartitionLabel),
    #[error("rights `{0}` cannot be encoded in a PKRU image")]
    UnrepresentableRights(AccessRights),
    #[error("unknown rights literal `{0}`")]
    BadRightsLiteral(String),
}

/// A subset of `{read, write}`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AccessRights(u8);

impl AccessRights {
    const READ_BIT: u8 = 0b01;
    const WRITE_BIT: u8 = 0b10;

    pub const NONE: AccessRights = AccessRights(0);
    pub const READ: AccessRights = AccessRights(Self::READ_BIT);
    pub const WRITE: AccessRights = AccessRights(Self::WRITE_BIT);
    pub const READ_WRITE: AccessRights = AccessRights(Self::READ_BIT | Self::WRITE_BIT);

    /// The four lattice elements, bottom first.
    pub const ALL: [AccessRights; 4] = [Self::NONE, Self::READ, Self::WRITE, Self::READ_WRITE];

    pub fn new(read: bool, write: bool) -> Self {
        let mut bits = 0;
        if read {
            bits |= Self::READ_BIT;
        }
        if write {
            bits |= Self::WRITE_BIT;
        }
        AccessRights(bits)
    }

    pub fn can_read(self) -> bool {
        self.0 & Self::READ_BIT != 0
    }

    pub fn can_write(self) -> bool {
        self.0 & Self::WRITE_BIT != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: AccessRights) -> AccessRights {
        AccessRights(self.0 | other.0)
    }

    pub fn intersection(self, other: AccessRights) -> AccessRights {
        AccessRights(self.0 & other.0)
    }

    pub fn without_write(self) -> AccessRights {
        AccessRights(self.0 & !Self::WRITE_BIT)
    }

    /// Whether `self` includes every right in `other`.
    pub fn includes(self, other: AccessRights) -> bool {
        self.0 & other.0 == other.0
    }

    /// True for the one value the access-disable/write-disable encoding
    /// cannot express.
    pub fn is_write_only(self) -> bool {
        self == Self::WRITE
    }
}

impl fmt::Display for AccessRights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.can_read(), self.can_write()) {
            (true, true) => "rw",
            (true, false) => "r",
            (false, true) => "w",
            (false, false) => "none",
        })
    }
}

impl fmt::Debug for AccessRights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl FromStr for AccessRights {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rw" | "wr" => Ok(Self::READ_WRITE),
            "r" => Ok(Self::READ),
            "w" => Ok(Self::WRITE),
            "none" | "-" => Ok(Self::NONE),
            other => Err(PolicyError::BadRightsLiteral(other.to_string())),
        }
    }
}

impl Serialize for AccessRights {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AccessRights {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Result of comparing two rights values under set inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RightsOrdering {
    Less,
    Equal,
    Greater,
    Incomparable,
}

pub fn rights_partial_order(a: AccessRights, b: AccessRights) -> RightsOrdering {
    match (b.includes(a), a.includes(b)) {
        (true, true) => RightsOrdering::Equal,
        (true, false) => RightsOrdering::Less,
        (false, true) => RightsOrdering::Greater,
        (false, false) => RightsOrdering::Incomparable,
    }
}

impl PartialOrd for AccessRights {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match rights_partial_order(*self, *other) {
            RightsOrdering::Less => Some(Ordering::Less),
            RightsOrdering::Equal => Some(Ordering::Equal),
            RightsOrdering::Greater => Some(Ordering::Greater),
            RightsOrdering::Incomparable => None,
        }
    }
}

/// Access-disable / write-disable bit pair for one key in a PKRU image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkruBits {
    pub access_disable: bool,
    pub write_disable: bool,
}

impl PkruBits {
    /// Decode back into the rights the bit pair grants.
    pub fn rights(self) -> AccessRights {
        if self.access_disable {
            AccessRights::NONE
        } else if self.write_disable {
            AccessRights::READ
        } else {
            AccessRights::READ_WRITE
        }
    }
}

pub fn rights_to_pkru_bits(rights: AccessRights) -> Result<PkruBits, PolicyError> {
    match (rights.can_read(), rights.can_write()) {
        (true, true) => Ok(PkruBits { access_disable: false, write_disable: false }),
        (true, false) => Ok(PkruBits { access_disable: false, write_disable: true }),
        (false, false) => Ok(PkruBits { access_disable: true, write_disable: true }),
        (false, true) => Err(PolicyError::UnrepresentableRights(rights)),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionLabel(pub u32);

impl fmt::Display for PartitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartitionId {
    pub label: PartitionLabel,
    pub name: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProtectionKey(pub u8);

impl fmt::Display for ProtectionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatementId(pub u32);

impl fmt::Display for StatementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Qualified variable name: `name` for globals, `function::name` for locals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableId(pub String);

impl VariableId {
    pub fn global(name: &str) -> Self {
        VariableId(name.to_string())
    }

    pub fn local(function: &str, name: &str) -> Self {
        VariableId(format!("{function}::{name}"))
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Rights per partition label.
pub type PartitionRights = BTreeMap<PartitionLabel, AccessRights>;

/// A full PKRU image expressed as rights per protection key.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RightsVector(pub BTreeMap<ProtectionKey, AccessRights>);

impl RightsVector {
    pub fn get(&self, key: ProtectionKey) -> AccessRights {
        self.0.get(&key).copied().unwrap_or(AccessRights::NONE)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ProtectionKey, AccessRights)> + '_ {
        self.0.iter().map(|(k, r)| (*k, *r))
    }
}

impl fmt::Display for RightsVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (key, rights)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{key}:{rights}")?;
        }
        f.write_str("}")
    }
}

impl FromStr for RightsVector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| format!("rights vector `{s}` is not braced"))?;
        let mut map = BTreeMap::new();
        if inner.is_empty() {
            return Ok(RightsVector(map));
        }
        for entry in inner.split(',') {
            let (key, rights) = entry.split_once(':').ok_or_else(|| format!("bad rights vector entry `{entry}`"))?;
            let key: u8 = key.parse().map_err(|_| format!("bad key `{key}`"))?;
            let rights: AccessRights = rights.parse().map_err(|e: PolicyError| e.to_string())?;
            map.insert(ProtectionKey(key), rights);
        }
        Ok(RightsVector(map))
    }
}

/// Injective map from partitions to protection keys 1..=15.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyAssignment {
    keys: BTreeMap<PartitionLabel, ProtectionKey>,
}

impl KeyAssignment {
    pub fn key_of(&self, partition: PartitionLabel) -> Option<ProtectionKey> {
        self.keys.get(&partition).copied()
    }

    pub fn partition_of(&self, key: ProtectionKey) -> Option<PartitionLabel> {
        self.keys.iter().find(|(_, k)| **k == key).map(|(p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PartitionLabel, ProtectionKey)> + '_ {
        self.keys.iter().map(|(p, k)| (*p, *k))
    }

    /// Translate partition rights into a full PKRU image. Partitions absent
    /// from `rights` get no access.
    pub fn to_vector(&self, rights: &PartitionRights) -> RightsVector {
        RightsVector(
            self.keys.iter().map(|(p, k)| (*k, rights.get(p).copied().unwrap_or(AccessRights::NONE))).collect(),
        )
    }
}

/// Assign keys 1, 2, 3, ... in declaration order. Key 0 stays with the runtime.
pub fn map_partitions_to_keys(partitions: &[PartitionLabel]) -> Result<KeyAssignment, PolicyError> {
    if partitions.len() > MAX_APPLICATION_PARTITIONS {
        return Err(PolicyError::KeyExhaustion { declared: partitions.len() });
    }
    let mut keys = BTreeMap::new();
    for (i, label) in partitions.iter().enumerate() {
        if keys.insert(*label, ProtectionKey(i as u8 + 1)).is_some() {
            return Err(PolicyError::DuplicatePartition(*label));
        }
    }
    Ok(KeyAssignment { keys })
}

/// The policy tuple. `privileges` is stored sparsely: a statement's rights on
/// its home partition default to that partition's unit rights, and on every
/// other partition to `defaults`; `overrides` replace either.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Policy {
    /// Declared partitions in declaration order.
    pub partitions: Vec<PartitionId>,
    /// phi: the minimum rights any code holds on each partition.
    pub defaults: PartitionRights,
    /// Rights code holds on its own partition, from the unit pragma.
    pub home_rights: PartitionRights,
    /// alpha: variable to partition.
    pub data_assignment: BTreeMap<VariableId, PartitionLabel>,
    /// Variables declared immutable.
    pub immutable: BTreeSet<VariableId>,
    /// Home partition of every statement.
    pub statement_home: BTreeMap<StatementId, PartitionLabel>,
    /// Refinement overrides of pi.
    pub overrides: BTreeMap<StatementId, PartitionRights>,
    /// Partition that owns the program entry point, if any.
    pub entry_partition: Option<PartitionLabel>,
}

impl Policy {
    pub fn labels(&self) -> Vec<PartitionLabel> {
        self.partitions.iter().map(|p| p.label).collect()
    }

    pub fn is_declared(&self, label: PartitionLabel) -> bool {
        self.partitions.iter().any(|p| p.label == label)
    }

    pub fn partition(&self, label: PartitionLabel) -> Option<&PartitionId> {
        self.partitions.iter().find(|p| p.label == label)
    }

    /// Look a partition up by display name or numeric label.
    pub fn find_partition(&self, name_or_label: &str) -> Option<&PartitionId> {
        if let Some(p) = self.partitions.iter().find(|p| p.name == name_or_label) {
            return Some(p);
        }
        let label: u32 = name_or_label.parse().ok()?;
        self.partition(PartitionLabel(label))
    }

    pub fn default_rights(&self, partition: PartitionLabel) -> AccessRights {
        self.defaults.get(&partition).copied().unwrap_or(AccessRights::NONE)
    }

    /// pi(s, p) before refinement overrides.
    pub fn implied_privilege(&self, statement: StatementId, partition: PartitionLabel) -> Option<AccessRights> {
        let home = *self.statement_home.get(&statement)?;
        if home == partition {
            Some(self.home_rights.get(&home).copied().unwrap_or(AccessRights::NONE))
        } else {
            Some(self.default_rights(partition))
        }
    }

    /// pi(s, p). `None` when the statement is unknown to the policy.
    pub fn privilege(&self, statement: StatementId, partition: PartitionLabel) -> Option<AccessRights> {
        if let Some(r) = self.overrides.get(&statement).and_then(|o| o.get(&partition)) {
            return Some(*r);
        }
        self.implied_privilege(statement, partition)
    }

    /// The dense row pi(s, .) over all declared partitions.
    pub fn privilege_row(&self, statement: StatementId) -> Option<PartitionRights> {
        self.statement_home.get(&statement)?;
        Some(
            self.partitions.iter().map(|p| (p.label, self.privilege(statement, p.label).unwrap_or_default())).collect(),
        )
    }

    /// Rights held by unrefined code whose home is `home`.
    pub fn default_vector(&self, home: PartitionLabel) -> PartitionRights {
        self.partitions
            .iter()
            .map(|p| {
                let rights = if p.label == home {
                    self.home_rights.get(&home).copied().unwrap_or(AccessRights::NONE)
                } else {
                    self.default_rights(p.label)
                };
                (p.label, rights)
            })
            .collect()
    }
}

/// pi(s, p) intersected with immutability of the accessed datum.
pub fn effective_rights(
    statement: StatementId,
    partition: PartitionLabel,
    policy: &Policy,
    immutable: bool,
) -> AccessRights {
    let rights = policy.privilege(statement, partition).unwrap_or(AccessRights::NONE);
    if immutable {
        rights.without_write()
    } else {
        rights
    }
}

/// Every variable and statement of the program a policy is checked against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgramIndex {
    pub variables: BTreeSet<VariableId>,
    pub statements: BTreeSet<StatementId>,
}

/// Enforcement backend the policy is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Protection keys: write-only rights are unrepresentable.
    Mpk,
    /// The abstract model only.
    Abstract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FindingCode {
    TotalityViolation,
    PrivilegeBelowDefault,
    UndeclaredPartition,
    UnrepresentableRights,
    DuplicatePartition,
    KeyExhaustion,
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One diagnostic. `location` never contains whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.severity, self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    fn error(&mut self, code: FindingCode, location: String, message: String) {
        self.findings.push(Finding { severity: Severity::Error, code, location, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

pub fn validate_policy(policy: &Policy, index: &ProgramIndex, backend: Backend) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut declared = BTreeSet::new();
    for p in &policy.partitions {
        if !declared.insert(p.label) {
            report.error(
                FindingCode::DuplicatePartition,
                format!("partition:{}", p.label),
                format!("label {} declared more than once", p.label),
            );
        }
    }

    for p in &policy.partitions {
        if !policy.defaults.contains_key(&p.label) {
            report.error(
                FindingCode::TotalityViolation,
                format!("partition:{}", p.label),
                format!("default rights undefined for partition {} ({})", p.label, p.name),
            );
        }
    }
    for label in policy.defaults.keys().chain(policy.home_rights.keys()) {
        if !declared.contains(label) {
            report.error(
                FindingCode::UndeclaredPartition,
                format!("partition:{label}"),
                format!("rights given for undeclared partition {label}"),
            );
        }
    }

    for var in &index.variables {
        match policy.data_assignment.get(var) {
            None => report.error(
                FindingCode::TotalityViolation,
                format!("var:{var}"),
                format!("variable {var} is not assigned to a partition"),
            ),
            Some(label) if !declared.contains(label) => report.error(
                FindingCode::UndeclaredPartition,
                format!("var:{var}"),
                format!("variable {var} assigned to undeclared partition {label}"),
            ),
            Some(_) => {}
        }
    }

    for stmt in &index.statements {
        match policy.statement_home.get(stmt) {
            None => report.error(
                FindingCode::TotalityViolation,
                format!("stmt:{stmt}"),
                format!("privileges undefined for statement {stmt}"),
            ),
            Some(label) if !declared.contains(label) => report.error(
                FindingCode::UndeclaredPartition,
                format!("stmt:{stmt}"),
                format!("statement {stmt} belongs to undeclared partition {label}"),
            ),
            Some(_) => {}
        }
    }
    for (stmt, row) in &policy.overrides {
        for label in row.keys() {
            if !declared.contains(label) {
                report.error(
                    FindingCode::UndeclaredPartition,
                    format!("stmt:{stmt}"),
                    format!("refinement on statement {stmt} names undeclared partition {label}"),
                );
            }
        }
    }

    let statements: BTreeSet<StatementId> =
        index.statements.iter().chain(policy.statement_home.keys()).copied().collect();
    for stmt in &statements {
        for p in &policy.partitions {
            let Some(granted) = policy.privilege(*stmt, p.label) else { continue };
            let floor = policy.default_rights(p.label);
            if !granted.includes(floor) {
                report.error(
                    FindingCode::PrivilegeBelowDefault,
                    format!("stmt:{stmt}/partition:{}", p.label),
                    format!("privilege {granted} on partition {} is below its default {floor}", p.label),
                );
            }
        }
    }

    if backend == Backend::Mpk {
        for (label, rights) in policy.defaults.iter().chain(policy.home_rights.iter()) {
            if rights.is_write_only() {
                report.error(
                    FindingCode::UnrepresentableRights,
                    format!("partition:{label}"),
                    format!("write-only rights on partition {label} cannot be enforced with protection keys"),
                );
            }
        }
        for (stmt, row) in &policy.overrides {
            for (label, rights) in row {
                if rights.is_write_only() {
                    report.error(
                        FindingCode::UnrepresentableRights,
                        format!("stmt:{stmt}/partition:{label}"),
                        format!("write-only refinement on partition {label} cannot be enforced with protection keys"),
                    );
                }
            }
        }
    }

    if policy.partitions.len() > MAX_APPLICATION_PARTITIONS {
        report.error(
            FindingCode::KeyExhaustion,
            "program".to_string(),
            PolicyError::KeyExhaustion { declared: policy.partitions.len() }.to_string(),
        );
    }

    report
}
