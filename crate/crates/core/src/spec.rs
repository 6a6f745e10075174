//! Group-role specifications.
//!
//! A specification document has a single `<group>` root. Group-level
//! `<criteria>` elements are inherited by every `<role>`; a role-local
//! criterion on the same term replaces the inherited one.
//!
//! ```xml
//! <group name="bus-monitoring">
//!   <criteria type="float" term="BATTERY_LEVEL" minimum="15"/>
//!   <role name="geolocator" cardinality="k1">
//!     <criteria type="boolean" term="GPS" value="TRUE" />
//!   </role>
//! </group>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A parsed group specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    /// Criteria inherited by all roles.
    pub criteria: Vec<Criterion>,
    /// Roles in document order.
    pub roles: Vec<RoleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    pub cardinality: Cardinality,
    pub criteria: Vec<Criterion>,
}

/// How many positions a role has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cardinality {
    Fixed(u32),
    /// A named parameter such as `k1`, bound at simulation start.
    Parameter { name: String, current: Option<u32> },
}

impl Cardinality {
    /// The number of positions, if known.
    pub fn current(&self) -> Option<u32> {
        match self {
            Cardinality::Fixed(k) => Some(*k),
            Cardinality::Parameter { current, .. } => *current,
        }
    }

    /// Sets the number of positions, keeping the parameter name.
    pub fn rebind(&mut self, k: u32) {
        match self {
            Cardinality::Fixed(v) => *v = k,
            Cardinality::Parameter { current, .. } => *current = Some(k),
        }
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cardinality::Fixed(k) => write!(f, "{k}"),
            Cardinality::Parameter { name, current: Some(k) } => write!(f, "{name}={k}"),
            Cardinality::Parameter { name, current: None } => write!(f, "{name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueType {
    Boolean,
    Float,
    String,
}

impl ValueType {
    fn as_str(self) -> &'static str {
        match self {
            ValueType::Boolean => "boolean",
            ValueType::Float => "float",
            ValueType::String => "string",
        }
    }
}

/// The test a criterion applies to a context fact. Only the attribute
/// combinations accepted by the parser can be represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    /// `type="boolean" value=".."`, optionally with `after="secs"`.
    Flag { value: bool, after_seconds: Option<u64> },
    /// `type="float" minimum=".."`; restrictive and comparative.
    Minimum(f64),
    /// `type="string" pattern=".."`.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub term: String,
    pub condition: Condition,
}

impl Criterion {
    pub fn flag(term: impl Into<String>, value: bool) -> Self {
        Criterion { term: term.into(), condition: Condition::Flag { value, after_seconds: None } }
    }

    pub fn flag_after(term: impl Into<String>, value: bool, after_seconds: u64) -> Self {
        Criterion {
            term: term.into(),
            condition: Condition::Flag { value, after_seconds: Some(after_seconds) },
        }
    }

    pub fn minimum(term: impl Into<String>, minimum: f64) -> Self {
        Criterion { term: term.into(), condition: Condition::Minimum(minimum) }
    }

    pub fn pattern(term: impl Into<String>, pattern: impl Into<String>) -> Self {
        Criterion { term: term.into(), condition: Condition::Pattern(pattern.into()) }
    }

    pub fn value_type(&self) -> ValueType {
        match self.condition {
            Condition::Flag { .. } => ValueType::Boolean,
            Condition::Minimum(_) => ValueType::Float,
            Condition::Pattern(_) => ValueType::String,
        }
    }

    /// Float criteria with a minimum also rank candidates.
    pub fn is_comparative(&self) -> bool {
        matches!(self.condition, Condition::Minimum(_))
    }

    pub fn required_value(&self) -> Option<bool> {
        match self.condition {
            Condition::Flag { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn minimum_value(&self) -> Option<f64> {
        match self.condition {
            Condition::Minimum(m) => Some(m),
            _ => None,
        }
    }

    pub fn pattern_value(&self) -> Option<&str> {
        match &self.condition {
            Condition::Pattern(p) => Some(p),
            _ => None,
        }
    }

    pub fn after_seconds(&self) -> Option<u64> {
        match self.condition {
            Condition::Flag { after_seconds, .. } => after_seconds,
            _ => None,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.condition {
            Condition::Flag { value, after_seconds: None } => write!(f, "{}={}", self.term, bool_str(*value)),
            Condition::Flag { value, after_seconds: Some(s) } => {
                write!(f, "{}={} after {s}s", self.term, bool_str(*value))
            }
            Condition::Minimum(m) => write!(f, "{}>={m}", self.term),
            Condition::Pattern(p) => write!(f, "{}~\"{p}\"", self.term),
        }
    }
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "TRUE"
    } else {
        "FALSE"
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Malformed(String),
    UnexpectedRoot(String),
    UnknownElement(String),
    UnknownAttribute { element: String, attribute: String },
    MissingAttribute { element: String, attribute: String },
    InvalidValue { attribute: String, value: String },
    IllegalCombination(String),
    DuplicateRole(String),
    DuplicateTerm(String),
    NonPositiveCardinality(String),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Malformed(msg) => write!(f, "malformed XML: {msg}"),
            ParseErrorKind::UnexpectedRoot(name) => write!(f, "expected <group> root, found <{name}>"),
            ParseErrorKind::UnknownElement(name) => write!(f, "unknown element <{name}>"),
            ParseErrorKind::UnknownAttribute { element, attribute } => {
                write!(f, "unknown attribute `{attribute}` on <{element}>")
            }
            ParseErrorKind::MissingAttribute { element, attribute } => {
                write!(f, "<{element}> is missing attribute `{attribute}`")
            }
            ParseErrorKind::InvalidValue { attribute, value } => {
                write!(f, "invalid value {value:?} for attribute `{attribute}`")
            }
            ParseErrorKind::IllegalCombination(msg) => write!(f, "illegal attribute combination: {msg}"),
            ParseErrorKind::DuplicateRole(name) => write!(f, "duplicate role `{name}`"),
            ParseErrorKind::DuplicateTerm(term) => write!(f, "duplicate criterion term `{term}` in one scope"),
            ParseErrorKind::NonPositiveCardinality(v) => write!(f, "cardinality must be positive, got {v}"),
        }
    }
}

/// A parse failure anchored to a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("no binding supplied for cardinality parameter `{0}`")]
    MissingBinding(String),
    #[error("binding for `{0}` must be positive")]
    NonPositiveBinding(String),
}

const GROUP_ATTRS: &[&str] = &["name"];
const ROLE_ATTRS: &[&str] = &["name", "cardinality"];
const CRITERIA_ATTRS: &[&str] = &["type", "term", "value", "minimum", "pattern", "after"];

fn end_position(text: &str) -> (u32, u32) {
    let line = text.lines().count().max(1) as u32 + u32::from(text.ends_with('\n'));
    let last = if text.ends_with('\n') { "" } else { text.lines().last().unwrap_or("") };
    (line, last.chars().count() as u32 + 1)
}

/// Parses a specification document.
pub fn parse_spec(document: &str) -> Result<GroupSpec, ParseError> {
    let doc = roxmltree::Document::parse(document).map_err(|e| {
        let (line, column) = match e {
            // reported at the document start; point at the end instead
            roxmltree::Error::UnexpectedEndOfStream | roxmltree::Error::UnclosedRootNode => end_position(document),
            _ => (e.pos().row, e.pos().col),
        };
        ParseError { line, column, kind: ParseErrorKind::Malformed(e.to_string()) }
    })?;
    let root = doc.root_element();
    let err_at = |node: roxmltree::Node, kind: ParseErrorKind| {
        let pos = doc.text_pos_at(node.range().start);
        ParseError { line: pos.row, column: pos.col, kind }
    };

    if root.tag_name().name() != "group" || root.tag_name().namespace().is_some() {
        return Err(err_at(root, ParseErrorKind::UnexpectedRoot(root.tag_name().name().to_string())));
    }
    check_attributes(root, GROUP_ATTRS).map_err(|k| err_at(root, k))?;
    let name = required_identifier(root, "name").map_err(|k| err_at(root, k))?;

    let mut spec = GroupSpec { name, criteria: Vec::new(), roles: Vec::new() };
    let mut group_terms = BTreeSet::new();
    let mut role_names = BTreeSet::new();

    // Text content such as the "(...)" elision marker is not part of the model.
    for child in root.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "criteria" => {
                let c = parse_criterion(child).map_err(|k| err_at(child, k))?;
                if !group_terms.insert(c.term.clone()) {
                    return Err(err_at(child, ParseErrorKind::DuplicateTerm(c.term)));
                }
                spec.criteria.push(c);
            }
            "role" => {
                let role = parse_role(child, &err_at)?;
                if !role_names.insert(role.name.clone()) {
                    return Err(err_at(child, ParseErrorKind::DuplicateRole(role.name)));
                }
                spec.roles.push(role);
            }
            other => return Err(err_at(child, ParseErrorKind::UnknownElement(other.to_string()))),
        }
    }
    Ok(spec)
}

fn parse_role<'a, F>(node: roxmltree::Node<'a, 'a>, err_at: &F) -> Result<RoleSpec, ParseError>
where
    F: Fn(roxmltree::Node, ParseErrorKind) -> ParseError,
{
    check_attributes(node, ROLE_ATTRS).map_err(|k| err_at(node, k))?;
    let name = required_identifier(node, "name").map_err(|k| err_at(node, k))?;
    let raw = required(node, "cardinality").map_err(|k| err_at(node, k))?;
    let cardinality = parse_cardinality(raw).map_err(|k| err_at(node, k))?;

    let mut criteria = Vec::new();
    let mut terms = BTreeSet::new();
    for child in node.children().filter(|n| n.is_element()) {
        if child.tag_name().name() != "criteria" {
            return Err(err_at(child, ParseErrorKind::UnknownElement(child.tag_name().name().to_string())));
        }
        let c = parse_criterion(child).map_err(|k| err_at(child, k))?;
        if !terms.insert(c.term.clone()) {
            return Err(err_at(child, ParseErrorKind::DuplicateTerm(c.term)));
        }
        criteria.push(c);
    }
    Ok(RoleSpec { name, cardinality, criteria })
}

fn parse_cardinality(raw: &str) -> Result<Cardinality, ParseErrorKind> {
    let raw = raw.trim();
    if raw.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+') {
        return match raw.parse::<i64>() {
            Ok(k) if k >= 1 => {
                let k = u32::try_from(k).map_err(|_| ParseErrorKind::InvalidValue {
                    attribute: "cardinality".into(),
                    value: raw.into(),
                })?;
                Ok(Cardinality::Fixed(k))
            }
            Ok(_) => Err(ParseErrorKind::NonPositiveCardinality(raw.into())),
            Err(_) => Err(ParseErrorKind::InvalidValue { attribute: "cardinality".into(), value: raw.into() }),
        };
    }
    if is_identifier(raw) {
        Ok(Cardinality::Parameter { name: raw.to_string(), current: None })
    } else {
        Err(ParseErrorKind::InvalidValue { attribute: "cardinality".into(), value: raw.into() })
    }
}

fn parse_criterion(node: roxmltree::Node) -> Result<Criterion, ParseErrorKind> {
    check_attributes(node, CRITERIA_ATTRS)?;
    if node.children().any(|n| n.is_element()) {
        let child = node.children().find(|n| n.is_element()).unwrap();
        return Err(ParseErrorKind::UnknownElement(child.tag_name().name().to_string()));
    }
    let term = required_identifier(node, "term")?;
    let ty = required(node, "type")?;
    let has = |a: &str| node.attribute(a).is_some();
    let present: Vec<&str> = ["value", "minimum", "pattern", "after"].into_iter().filter(|a| has(a)).collect();

    let condition = match ty {
        "boolean" => {
            if present.iter().any(|a| *a == "minimum" || *a == "pattern") || !has("value") {
                return Err(illegal(ty, &present));
            }
            let raw = node.attribute("value").unwrap();
            let value = match raw.to_ascii_uppercase().as_str() {
                "TRUE" => true,
                "FALSE" => false,
                _ => return Err(ParseErrorKind::InvalidValue { attribute: "value".into(), value: raw.into() }),
            };
            let after_seconds = match node.attribute("after") {
                None => None,
                Some(raw) => Some(raw.trim().parse::<u64>().map_err(|_| ParseErrorKind::InvalidValue {
                    attribute: "after".into(),
                    value: raw.into(),
                })?),
            };
            Condition::Flag { value, after_seconds }
        }
        "float" => {
            if present != ["minimum"] {
                return Err(illegal(ty, &present));
            }
            let raw = node.attribute("minimum").unwrap();
            let m = raw.trim().parse::<f64>().ok().filter(|m| m.is_finite()).ok_or_else(|| {
                ParseErrorKind::InvalidValue { attribute: "minimum".into(), value: raw.into() }
            })?;
            Condition::Minimum(m)
        }
        "string" => {
            if present != ["pattern"] {
                return Err(illegal(ty, &present));
            }
            Condition::Pattern(node.attribute("pattern").unwrap().to_string())
        }
        other => return Err(ParseErrorKind::InvalidValue { attribute: "type".into(), value: other.into() }),
    };
    Ok(Criterion { term, condition })
}

fn illegal(ty: &str, present: &[&str]) -> ParseErrorKind {
    let attrs = if present.is_empty() { "no value attribute".to_string() } else { present.join("+") };
    ParseErrorKind::IllegalCombination(format!("type=\"{ty}\" with {attrs}"))
}

fn check_attributes(node: roxmltree::Node, allowed: &[&str]) -> Result<(), ParseErrorKind> {
    for attr in node.attributes() {
        if attr.namespace().is_some() || !allowed.contains(&attr.name()) {
            return Err(ParseErrorKind::UnknownAttribute {
                element: node.tag_name().name().to_string(),
                attribute: attr.name().to_string(),
            });
        }
    }
    Ok(())
}

fn required<'a>(node: roxmltree::Node<'a, '_>, attr: &str) -> Result<&'a str, ParseErrorKind> {
    node.attribute(attr).ok_or_else(|| ParseErrorKind::MissingAttribute {
        element: node.tag_name().name().to_string(),
        attribute: attr.to_string(),
    })
}

fn required_identifier(node: roxmltree::Node, attr: &str) -> Result<String, ParseErrorKind> {
    let raw = required(node, attr)?;
    if raw.trim().is_empty() {
        return Err(ParseErrorKind::InvalidValue { attribute: attr.into(), value: raw.into() });
    }
    Ok(raw.to_string())
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

impl GroupSpec {
    pub fn role(&self, name: &str) -> Option<&RoleSpec> {
        self.roles.iter().find(|r| r.name == name)
    }

    pub fn role_mut(&mut self, name: &str) -> Option<&mut RoleSpec> {
        self.roles.iter_mut().find(|r| r.name == name)
    }

    /// Names of all unbound cardinality parameters, deduplicated.
    pub fn unbound_parameters(&self) -> Vec<String> {
        let mut out = BTreeSet::new();
        for role in &self.roles {
            if let Cardinality::Parameter { name, current: None } = &role.cardinality {
                out.insert(name.clone());
            }
        }
        out.into_iter().collect()
    }

    /// Appends group-level criteria from `extra`, replacing any on the same term.
    pub fn with_group_criteria(mut self, extra: &[Criterion]) -> Self {
        for c in extra {
            match self.criteria.iter_mut().find(|g| g.term == c.term) {
                Some(slot) => *slot = c.clone(),
                None => self.criteria.push(c.clone()),
            }
        }
        self
    }

    /// Serializes back into the document format accepted by [`parse_spec`].
    /// Bound parameters are written under their parameter name.
    pub fn to_xml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<group name=\"{}\">", escape(&self.name));
        for c in &self.criteria {
            write_criterion(&mut out, c, "  ");
        }
        for role in &self.roles {
            let card = match &role.cardinality {
                Cardinality::Fixed(k) => k.to_string(),
                Cardinality::Parameter { name, .. } => name.clone(),
            };
            let _ = writeln!(out, "  <role name=\"{}\" cardinality=\"{}\">", escape(&role.name), escape(&card));
            for c in &role.criteria {
                write_criterion(&mut out, c, "    ");
            }
            out.push_str("  </role>\n");
        }
        out.push_str("</group>\n");
        out
    }

    /// A short human-readable description, one line per role.
    pub fn summary(&self) -> String {
        let mut out = format!("group {} ({} roles)\n", self.name, self.roles.len());
        if !self.criteria.is_empty() {
            let crit: Vec<String> = self.criteria.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "  inherited: {}", crit.join(", "));
        }
        for role in &self.roles {
            let eff = effective_criteria(self, &role.name).unwrap_or_default();
            let crit: Vec<String> = eff.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "  role {} [cardinality {}]: {}", role.name, role.cardinality, crit.join(", "));
        }
        out
    }
}

fn write_criterion(out: &mut String, c: &Criterion, indent: &str) {
    let term = escape(&c.term);
    let ty = c.value_type().as_str();
    let _ = match &c.condition {
        Condition::Flag { value, after_seconds: None } => {
            writeln!(out, "{indent}<criteria type=\"{ty}\" term=\"{term}\" value=\"{}\" />", bool_str(*value))
        }
        Condition::Flag { value, after_seconds: Some(s) } => writeln!(
            out,
            "{indent}<criteria type=\"{ty}\" term=\"{term}\" value=\"{}\" after=\"{s}\" />",
            bool_str(*value)
        ),
        Condition::Minimum(m) => writeln!(out, "{indent}<criteria type=\"{ty}\" term=\"{term}\" minimum=\"{m}\" />"),
        Condition::Pattern(p) => {
            writeln!(out, "{indent}<criteria type=\"{ty}\" term=\"{term}\" pattern=\"{}\" />", escape(p))
        }
    };
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Group criteria merged with the role's own. A role-local criterion
/// replaces the inherited one on the same term in place; remaining local
/// criteria follow in document order.
pub fn effective_criteria(spec: &GroupSpec, role: &str) -> Result<Vec<Criterion>, SpecError> {
    let role = spec.role(role).ok_or_else(|| SpecError::UnknownRole(role.to_string()))?;
    let mut out: Vec<Criterion> = spec
        .criteria
        .iter()
        .map(|g| role.criteria.iter().find(|r| r.term == g.term).unwrap_or(g).clone())
        .collect();
    for local in &role.criteria {
        if !spec.criteria.iter().any(|g| g.term == local.term) {
            out.push(local.clone());
        }
    }
    Ok(out)
}

/// Binds every parameterized cardinality. Already-bound parameters keep
/// their value unless a new binding is supplied.
pub fn bind_cardinality(spec: &GroupSpec, bindings: &BTreeMap<String, u32>) -> Result<GroupSpec, SpecError> {
    let mut out = spec.clone();
    for role in &mut out.roles {
        if let Cardinality::Parameter { name, current } = &mut role.cardinality {
            match bindings.get(name.as_str()) {
                Some(0) => return Err(SpecError::NonPositiveBinding(name.clone())),
                Some(&k) => *current = Some(k),
                None if current.is_some() => {}
                None => return Err(SpecError::MissingBinding(name.clone())),
            }
        }
    }
    Ok(out)
}
