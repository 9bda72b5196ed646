//! Spheres of replication: declarative specs plus the pure comparison and
//! voting logic shared by every execution path.
//!
//! A sphere is the logical boundary around a replicable unit of computation.
//! Faults inside the sphere are observable only at its boundary, through the
//! output bindings named in the compare list. Comparing those outputs across
//! two replicas detects an error; voting across three corrects it.

use crate::scalar::Scalar;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Redundancy level of a sphere.
///
/// `Detect` runs two replicas and compares; `Correct` runs three and votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Strength {
    Off = 0,
    Detect = 1,
    Correct = 2,
}

impl Strength {
    /// Number of replica executions this strength implies.
    pub fn replica_count(self) -> usize {
        match self {
            Strength::Off => 1,
            Strength::Detect => 2,
            Strength::Correct => 3,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Strength {
        match v {
            0 => Strength::Off,
            1 => Strength::Detect,
            _ => Strength::Correct,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strength::Off => "off",
            Strength::Detect => "detect",
            Strength::Correct => "correct",
        }
    }
}

impl FromStr for Strength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" => Ok(Strength::Off),
            "detect" => Ok(Strength::Detect),
            "correct" => Ok(Strength::Correct),
            other => Err(format!("unknown strength `{other}` (expected off|detect|correct)")),
        }
    }
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque identifier of a sphere of replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SphereId(pub u64);

impl From<u64> for SphereId {
    fn from(v: u64) -> Self {
        SphereId(v)
    }
}

impl fmt::Display for SphereId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sphere#{}", self.0)
    }
}

/// How two output payloads are judged equal.
///
/// Replicas execute identical instruction sequences on shared inputs, so
/// bitwise equality is the default. An absolute tolerance can be opted into
/// per sphere for platforms with non-deterministic reduction orders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComparePolicy {
    Bitwise,
    AbsoluteTolerance(f64),
}

/// Declarative description of one sphere of replication.
///
/// Shared bindings are handed to every replica by reference, private bindings
/// are copied per replica, and compare bindings are the outputs checked at
/// the barrier.
#[derive(Debug, Clone)]
pub struct SphereSpec {
    pub id: SphereId,
    /// Maximum redundancy the caller asks for; the runtime may run with less.
    pub strength_requested: Strength,
    pub shared_vars: Vec<String>,
    pub private_vars: Vec<String>,
    pub compare_vars: Vec<Arc<str>>,
    pub compare_policy: ComparePolicy,
}

impl SphereSpec {
    pub fn new(id: impl Into<SphereId>, strength: Strength) -> Self {
        SphereSpec {
            id: id.into(),
            strength_requested: strength,
            shared_vars: Vec::new(),
            private_vars: Vec::new(),
            compare_vars: Vec::new(),
            compare_policy: ComparePolicy::Bitwise,
        }
    }

    pub fn share<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.shared_vars.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn private<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.private_vars.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn compare<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.compare_vars
            .extend(names.into_iter().map(|s| Arc::from(s.as_ref())));
        self
    }

    pub fn policy(mut self, policy: ComparePolicy) -> Self {
        self.compare_policy = policy;
        self
    }

    /// Checks the spec invariants; see [`validate_spec`].
    pub fn validate(&self) -> Result<(), SpecError> {
        validate_spec(self)
    }
}

/// Violation of a [`SphereSpec`] invariant.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpecError {
    #[error("variable `{0}` appears in both the shared and private scoping lists")]
    OverlappingScopes(String),
    #[error("strength `{0}` requires a non-empty compare list")]
    EmptyCompareList(Strength),
    #[error("compare tolerance must be nonnegative, got {0}")]
    NegativeTolerance(f64),
}

/// Returns `Ok` iff all spec invariants hold: scoping lists are disjoint,
/// the compare list is non-empty whenever redundancy is requested, and any
/// tolerance is nonnegative.
pub fn validate_spec(spec: &SphereSpec) -> Result<(), SpecError> {
    let shared: HashSet<&str> = spec.shared_vars.iter().map(String::as_str).collect();
    for name in &spec.private_vars {
        if shared.contains(name.as_str()) {
            return Err(SpecError::OverlappingScopes(name.clone()));
        }
    }
    if spec.strength_requested != Strength::Off && spec.compare_vars.is_empty() {
        return Err(SpecError::EmptyCompareList(spec.strength_requested));
    }
    if let ComparePolicy::AbsoluteTolerance(eps) = spec.compare_policy {
        if !(eps >= 0.0) {
            return Err(SpecError::NegativeTolerance(eps));
        }
    }
    Ok(())
}

/// A compared payload: a single scalar or an array, element-wise compared.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T> {
    Scalar(T),
    Array(Vec<T>),
}

impl<T> Value<T> {
    pub fn len(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Array(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Scalar(_) => "scalar",
            Value::Array(_) => "array",
        }
    }
}

impl<T: Scalar> Value<T> {
    /// The scalar payload, if this is a scalar value.
    pub fn as_scalar(&self) -> Option<T> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::Array(_) => None,
        }
    }

    pub fn as_slice(&self) -> &[T] {
        match self {
            Value::Scalar(v) => std::slice::from_ref(v),
            Value::Array(v) => v.as_slice(),
        }
    }
}

/// The compared outputs produced by one replica of one sphere.
#[derive(Debug, Clone)]
pub struct OutputRecord<T> {
    pub sphere_id: SphereId,
    pub replica_index: usize,
    /// Named payloads, in the sphere's `compare_vars` order.
    pub values: Vec<(Arc<str>, Value<T>)>,
    pub produced_at: Instant,
}

impl<T> OutputRecord<T> {
    pub fn new(
        sphere_id: SphereId,
        replica_index: usize,
        values: Vec<(Arc<str>, Value<T>)>,
    ) -> Self {
        OutputRecord {
            sphere_id,
            replica_index,
            values,
            produced_at: Instant::now(),
        }
    }

    pub fn value(&self, name: &str) -> Option<&Value<T>> {
        self.values
            .iter()
            .find(|(n, _)| n.as_ref() == name)
            .map(|(_, v)| v)
    }
}

/// Divergent-name marker used when a replica produced no record at all
/// (it panicked or never deposited); closes the comparison algebra.
pub const REPLICA_MISSING: &str = "replica-missing";

/// Result of comparing two replica records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComparisonOutcome {
    Match,
    Mismatch {
        /// First compared variable (in compare-list order) whose payloads diverge.
        first_divergent: String,
        /// The replica indices that were compared.
        replicas: (usize, usize),
    },
}

impl ComparisonOutcome {
    pub fn is_match(&self) -> bool {
        matches!(self, ComparisonOutcome::Match)
    }
}

/// Result of majority voting over three replica records.
#[derive(Debug, Clone, PartialEq)]
pub enum VoteResult<T> {
    /// All three replicas pairwise-match; the agreed payloads are returned.
    Unanimous(Vec<(Arc<str>, Value<T>)>),
    /// Exactly one replica diverges per variable; resolved independently per
    /// variable, `outvoted` is the loser on the first divergent variable.
    MajorityCorrected {
        values: Vec<(Arc<str>, Value<T>)>,
        outvoted: usize,
    },
    /// Some variable has no two replicas in agreement.
    NoMajority,
}

/// Structural incompatibility between records under comparison.
///
/// This signals a runtime bug (records from different spheres, or replicas
/// that produced differently shaped payloads), not a detected fault.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("records belong to different spheres: {0} vs {1}")]
    SphereIdMismatch(SphereId, SphereId),
    #[error("records carry {0} vs {1} compared values")]
    CountMismatch(usize, usize),
    #[error("value name lists differ at position {position}: `{left}` vs `{right}`")]
    NameMismatch {
        position: usize,
        left: String,
        right: String,
    },
    #[error("payload `{name}` is {left} in one record and {right} in the other")]
    KindMismatch {
        name: String,
        left: &'static str,
        right: &'static str,
    },
    #[error("payload `{name}` has {left} elements in one record and {right} in the other")]
    LengthMismatch {
        name: String,
        left: usize,
        right: usize,
    },
}

fn check_shapes<T: Scalar>(a: &OutputRecord<T>, b: &OutputRecord<T>) -> Result<(), ShapeError> {
    if a.sphere_id != b.sphere_id {
        return Err(ShapeError::SphereIdMismatch(a.sphere_id, b.sphere_id));
    }
    if a.values.len() != b.values.len() {
        return Err(ShapeError::CountMismatch(a.values.len(), b.values.len()));
    }
    for (position, ((na, va), (nb, vb))) in a.values.iter().zip(&b.values).enumerate() {
        if na != nb {
            return Err(ShapeError::NameMismatch {
                position,
                left: na.to_string(),
                right: nb.to_string(),
            });
        }
        match (va, vb) {
            (Value::Scalar(_), Value::Scalar(_)) => {}
            (Value::Array(x), Value::Array(y)) => {
                if x.len() != y.len() {
                    return Err(ShapeError::LengthMismatch {
                        name: na.to_string(),
                        left: x.len(),
                        right: y.len(),
                    });
                }
            }
            _ => {
                return Err(ShapeError::KindMismatch {
                    name: na.to_string(),
                    left: va.kind(),
                    right: vb.kind(),
                });
            }
        }
    }
    Ok(())
}

fn scalars_match<T: Scalar>(x: T, y: T, policy: ComparePolicy) -> bool {
    // Equal bit patterns always match, so NaN payloads compare equal to
    // themselves under either policy.
    if x.to_bits_u64() == y.to_bits_u64() {
        return true;
    }
    match policy {
        ComparePolicy::Bitwise => false,
        ComparePolicy::AbsoluteTolerance(eps) => x.abs_diff_f64(y) <= eps,
    }
}

fn payloads_match<T: Scalar>(a: &Value<T>, b: &Value<T>, policy: ComparePolicy) -> bool {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| scalars_match(*x, *y, policy))
}

/// Compares two replica records element-wise under `policy`.
///
/// Returns `Match` iff every paired payload is equal; otherwise reports the
/// first divergent variable in compare-list order.
pub fn compare_outputs<T: Scalar>(
    a: &OutputRecord<T>,
    b: &OutputRecord<T>,
    policy: ComparePolicy,
) -> Result<ComparisonOutcome, ShapeError> {
    check_shapes(a, b)?;
    for ((name, va), (_, vb)) in a.values.iter().zip(&b.values) {
        if !payloads_match(va, vb, policy) {
            return Ok(ComparisonOutcome::Mismatch {
                first_divergent: name.to_string(),
                replicas: (a.replica_index, b.replica_index),
            });
        }
    }
    Ok(ComparisonOutcome::Match)
}

/// Majority-votes across three replica records.
///
/// Each variable is resolved independently: the value agreed by at least two
/// replicas wins. When the three records are not unanimous, the reported
/// `outvoted` replica is the loser on the first divergent variable. If for
/// some variable no pair agrees, the vote is `NoMajority`.
pub fn majority_vote<T: Scalar>(
    a: &OutputRecord<T>,
    b: &OutputRecord<T>,
    c: &OutputRecord<T>,
    policy: ComparePolicy,
) -> Result<VoteResult<T>, ShapeError> {
    check_shapes(a, b)?;
    check_shapes(a, c)?;
    check_shapes(b, c)?;

    let mut values = Vec::with_capacity(a.values.len());
    let mut outvoted: Option<usize> = None;

    for i in 0..a.values.len() {
        let (name, va) = &a.values[i];
        let vb = &b.values[i].1;
        let vc = &c.values[i].1;
        let m01 = payloads_match(va, vb, policy);
        let m02 = payloads_match(va, vc, policy);
        let m12 = payloads_match(vb, vc, policy);

        let (agreed, loser) = if m01 && m02 && m12 {
            (va.clone(), None)
        } else if m01 {
            (va.clone(), Some(2))
        } else if m02 {
            (va.clone(), Some(1))
        } else if m12 {
            (vb.clone(), Some(0))
        } else {
            return Ok(VoteResult::NoMajority);
        };

        if outvoted.is_none() {
            outvoted = loser;
        }
        values.push((name.clone(), agreed));
    }

    Ok(match outvoted {
        None => VoteResult::Unanimous(values),
        Some(loser) => VoteResult::MajorityCorrected { values, outvoted: loser },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(replica: usize, values: Vec<(&str, Value<f64>)>) -> OutputRecord<f64> {
        OutputRecord::new(
            SphereId(1),
            replica,
            values
                .into_iter()
                .map(|(n, v)| (Arc::from(n), v))
                .collect(),
        )
    }

    fn irec(replica: usize, v: i64) -> OutputRecord<i64> {
        OutputRecord::new(SphereId(1), replica, vec![(Arc::from("y"), Value::Scalar(v))])
    }

    #[test]
    fn validate_well_formed_spec() {
        let spec = SphereSpec::new(0u64, Strength::Detect)
            .share(["A", "B"])
            .private(["k"])
            .compare(["y"]);
        assert_eq!(spec.validate(), Ok(()));
    }

    #[test]
    fn validate_rejects_overlapping_scopes() {
        let spec = SphereSpec::new(0u64, Strength::Detect)
            .share(["A"])
            .private(["A"])
            .compare(["y"]);
        assert_eq!(
            spec.validate(),
            Err(SpecError::OverlappingScopes("A".into()))
        );
    }

    #[test]
    fn validate_rejects_empty_compare_list() {
        let spec = SphereSpec::new(0u64, Strength::Detect).share(["A"]);
        assert_eq!(
            spec.validate(),
            Err(SpecError::EmptyCompareList(Strength::Detect))
        );
    }

    #[test]
    fn validate_rejects_negative_tolerance() {
        let spec = SphereSpec::new(0u64, Strength::Detect)
            .compare(["y"])
            .policy(ComparePolicy::AbsoluteTolerance(-1e-9));
        assert_eq!(spec.validate(), Err(SpecError::NegativeTolerance(-1e-9)));
    }

    #[test]
    fn validate_allows_off_without_compare() {
        let spec = SphereSpec::new(0u64, Strength::Off);
        assert_eq!(spec.validate(), Ok(()));
    }

    #[test]
    fn compare_identical_payloads_match() {
        let a = rec(0, vec![("y", Value::Scalar(3.0))]);
        let b = rec(1, vec![("y", Value::Scalar(3.0))]);
        assert_eq!(
            compare_outputs(&a, &b, ComparePolicy::Bitwise).unwrap(),
            ComparisonOutcome::Match
        );
    }

    #[test]
    fn compare_one_ulp_diverges_bitwise() {
        let a = rec(0, vec![("y", Value::Scalar(3.0))]);
        let b = rec(1, vec![("y", Value::Scalar(3.0 + 2f64.powi(-20)))]);
        assert_eq!(
            compare_outputs(&a, &b, ComparePolicy::Bitwise).unwrap(),
            ComparisonOutcome::Mismatch {
                first_divergent: "y".into(),
                replicas: (0, 1)
            }
        );
    }

    #[test]
    fn compare_within_tolerance_matches() {
        let a = rec(0, vec![("y", Value::Scalar(1.0))]);
        let b = rec(1, vec![("y", Value::Scalar(1.0 + 1e-12))]);
        assert_eq!(
            compare_outputs(&a, &b, ComparePolicy::AbsoluteTolerance(1e-9)).unwrap(),
            ComparisonOutcome::Match
        );
    }

    #[test]
    fn compare_reports_first_divergent_in_order() {
        let a = rec(0, vec![("u", Value::Scalar(1.0)), ("v", Value::Scalar(2.0))]);
        let b = rec(1, vec![("u", Value::Scalar(9.0)), ("v", Value::Scalar(9.0))]);
        match compare_outputs(&a, &b, ComparePolicy::Bitwise).unwrap() {
            ComparisonOutcome::Mismatch { first_divergent, .. } => {
                assert_eq!(first_divergent, "u")
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn compare_rejects_shape_divergence() {
        let a = rec(0, vec![("y", Value::Array(vec![1.0, 2.0]))]);
        let b = rec(1, vec![("y", Value::Array(vec![1.0]))]);
        assert!(matches!(
            compare_outputs(&a, &b, ComparePolicy::Bitwise),
            Err(ShapeError::LengthMismatch { .. })
        ));
        let c = rec(1, vec![("y", Value::Scalar(1.0))]);
        assert!(matches!(
            compare_outputs(&a, &c, ComparePolicy::Bitwise),
            Err(ShapeError::KindMismatch { .. })
        ));
    }

    #[test]
    fn vote_unanimous() {
        let r = majority_vote(&irec(0, 5), &irec(1, 5), &irec(2, 5), ComparePolicy::Bitwise)
            .unwrap();
        match r {
            VoteResult::Unanimous(values) => {
                assert_eq!(values[0].1, Value::Scalar(5));
            }
            other => panic!("expected unanimous, got {other:?}"),
        }
    }

    #[test]
    fn vote_two_of_three() {
        let r = majority_vote(&irec(0, 5), &irec(1, 9), &irec(2, 5), ComparePolicy::Bitwise)
            .unwrap();
        assert_eq!(
            r,
            VoteResult::MajorityCorrected {
                values: vec![(Arc::from("y"), Value::Scalar(5))],
                outvoted: 1
            }
        );
    }

    #[test]
    fn vote_all_distinct_is_no_majority() {
        let r = majority_vote(&irec(0, 1), &irec(1, 2), &irec(2, 3), ComparePolicy::Bitwise)
            .unwrap();
        assert_eq!(r, VoteResult::NoMajority);
    }

    #[test]
    fn vote_resolves_variables_independently() {
        // Replica 0 wrong on `u`, replica 2 wrong on `v`: both corrected,
        // outvoted reported from the first divergent variable.
        let a = rec(0, vec![("u", Value::Scalar(9.0)), ("v", Value::Scalar(2.0))]);
        let b = rec(1, vec![("u", Value::Scalar(1.0)), ("v", Value::Scalar(2.0))]);
        let c = rec(2, vec![("u", Value::Scalar(1.0)), ("v", Value::Scalar(7.0))]);
        match majority_vote(&a, &b, &c, ComparePolicy::Bitwise).unwrap() {
            VoteResult::MajorityCorrected { values, outvoted } => {
                assert_eq!(values[0].1, Value::Scalar(1.0));
                assert_eq!(values[1].1, Value::Scalar(2.0));
                assert_eq!(outvoted, 0);
            }
            other => panic!("expected corrected, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_matches_itself() {
        let a = rec(0, vec![("y", Value::Scalar(f64::NAN))]);
        let b = rec(1, vec![("y", Value::Scalar(f64::NAN))]);
        assert!(compare_outputs(&a, &b, ComparePolicy::Bitwise)
            .unwrap()
            .is_match());
        assert!(compare_outputs(&a, &b, ComparePolicy::AbsoluteTolerance(0.0))
            .unwrap()
            .is_match());
    }

    #[test]
    fn bitwise_equals_zero_tolerance_on_8bit_payloads_exhaustive() {
        for x in 0..=255u8 {
            for y in 0..=255u8 {
                let a = OutputRecord::new(
                    SphereId(0),
                    0,
                    vec![(Arc::from("y"), Value::Scalar(x))],
                );
                let b = OutputRecord::new(
                    SphereId(0),
                    1,
                    vec![(Arc::from("y"), Value::Scalar(y))],
                );
                let bitwise = compare_outputs(&a, &b, ComparePolicy::Bitwise).unwrap();
                let tol0 =
                    compare_outputs(&a, &b, ComparePolicy::AbsoluteTolerance(0.0)).unwrap();
                assert_eq!(bitwise.is_match(), tol0.is_match(), "x={x} y={y}");
            }
        }
    }
}
