//! CWL-subset tool descriptions: parsing, the software catalog, form schemas
//! and command-line construction.
//!
//! Supported: `class: CommandLineTool` with `cwlVersion` v1.0, v1.1 or v1.2;
//! input types `int`, `float`, `string`, `boolean`, `File` and `enum`; an
//! optional `?` suffix (or a `["null", T]` union) marks an input optional.
//! JavaScript expressions, secondary files and arrays are rejected or ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value as Yaml};

use crate::error::{Error, Result};

pub const SUPPORTED_CWL_VERSIONS: [&str; 3] = ["v1.0", "v1.1", "v1.2"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Float,
    String,
    Boolean,
    File,
    Enum { symbols: Vec<String> },
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamType::Int => f.write_str("int"),
            ParamType::Float => f.write_str("float"),
            ParamType::String => f.write_str("string"),
            ParamType::Boolean => f.write_str("boolean"),
            ParamType::File => f.write_str("File"),
            ParamType::Enum { symbols } => write!(f, "enum({})", symbols.join(",")),
        }
    }
}

/// A reference to a file; `size` follows the CWL File object field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub class: FileClass,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FileClass {
    File,
}

impl FileRef {
    pub fn new(path: impl Into<String>) -> Self {
        Self { class: FileClass::File, path: path.into(), size: None }
    }

    pub fn with_size(path: impl Into<String>, size: u64) -> Self {
        Self { class: FileClass::File, path: path.into(), size: Some(size) }
    }

    /// Declared size, falling back to the size on disk.
    pub fn resolved_size(&self) -> Option<u64> {
        self.size.or_else(|| fs::metadata(&self.path).ok().map(|m| m.len()))
    }
}

/// A bound input value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Boolean(bool),
    Int(i64),
    Float(f64),
    File(FileRef),
    String(String),
}

impl ParamValue {
    pub fn matches(&self, ty: &ParamType) -> bool {
        match (self, ty) {
            (ParamValue::Int(_), ParamType::Int) => true,
            (ParamValue::Float(_) | ParamValue::Int(_), ParamType::Float) => true,
            (ParamValue::String(_), ParamType::String) => true,
            (ParamValue::Boolean(_), ParamType::Boolean) => true,
            (ParamValue::File(_), ParamType::File) => true,
            (ParamValue::String(s), ParamType::Enum { symbols }) => symbols.contains(s),
            _ => false,
        }
    }

    /// Coerces a raw JSON value to `ty`. Strings are parsed for scalar types
    /// so that command-line `k=v` pairs can be passed through unchanged.
    pub fn coerce(ty: &ParamType, raw: &serde_json::Value) -> std::result::Result<ParamValue, String> {
        use serde_json::Value as J;
        let fail = || format!("expected {ty}, got {raw}");
        match ty {
            ParamType::Int => match raw {
                J::Number(n) => n.as_i64().map(ParamValue::Int).ok_or_else(fail),
                J::String(s) => s.trim().parse().map(ParamValue::Int).map_err(|_| fail()),
                _ => Err(fail()),
            },
            ParamType::Float => match raw {
                J::Number(n) => n.as_f64().map(ParamValue::Float).ok_or_else(fail),
                J::String(s) => match s.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(ParamValue::Float(v)),
                    _ => Err(fail()),
                },
                _ => Err(fail()),
            },
            ParamType::String => match raw {
                J::String(s) => Ok(ParamValue::String(s.clone())),
                _ => Err(fail()),
            },
            ParamType::Boolean => match raw {
                J::Bool(b) => Ok(ParamValue::Boolean(*b)),
                J::String(s) if s == "true" => Ok(ParamValue::Boolean(true)),
                J::String(s) if s == "false" => Ok(ParamValue::Boolean(false)),
                _ => Err(fail()),
            },
            ParamType::File => match raw {
                J::String(s) if !s.is_empty() => Ok(ParamValue::File(FileRef::new(s.clone()))),
                J::Object(map) => {
                    if map.get("class").and_then(J::as_str).is_some_and(|c| c != "File") {
                        return Err(fail());
                    }
                    let path = map
                        .get("path")
                        .or_else(|| map.get("location"))
                        .and_then(J::as_str)
                        .ok_or_else(fail)?;
                    let size = match map.get("size") {
                        None | Some(J::Null) => None,
                        Some(v) => Some(v.as_u64().ok_or_else(fail)?),
                    };
                    Ok(ParamValue::File(FileRef { class: FileClass::File, path: path.to_string(), size }))
                }
                _ => Err(fail()),
            },
            ParamType::Enum { symbols } => match raw {
                J::String(s) if symbols.contains(s) => Ok(ParamValue::String(s.clone())),
                J::String(s) => Err(format!("`{s}` is not one of [{}]", symbols.join(", "))),
                _ => Err(fail()),
            },
        }
    }

    /// Rendering used on a command line.
    pub fn to_arg(&self) -> String {
        match self {
            ParamValue::Boolean(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(v) => v.to_string(),
            ParamValue::File(f) => f.path.clone(),
            ParamValue::String(s) => s.clone(),
        }
    }
}

/// Input-id to value map; ordered so serialized job specs are stable.
pub type Bindings = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBinding {
    #[serde(default)]
    pub position: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputParameter {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub param_type: ParamType,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<InputBinding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputParameter {
    pub id: String,
    pub glob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub id: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Container image reference, carried verbatim and never resolved.
    pub image_ref: String,
    pub base_command: Vec<String>,
    pub inputs: Vec<InputParameter>,
    pub outputs: Vec<OutputParameter>,
}

impl ToolDescriptor {
    pub fn input(&self, id: &str) -> Option<&InputParameter> {
        self.inputs.iter().find(|i| i.id == id)
    }

    /// `<id>@<version>`.
    pub fn reference(&self) -> String {
        format!("{}@{}", self.id, self.version)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_command.is_empty() || self.base_command.iter().any(String::is_empty) {
            return Err(Error::MissingBaseCommand);
        }
        if self.id.is_empty() || self.id.contains(['/', '@']) {
            return Err(Error::invalid(format!("invalid tool id `{}`", self.id)));
        }
        let mut seen = HashSet::new();
        for input in &self.inputs {
            if !seen.insert(input.id.as_str()) {
                return Err(Error::DuplicateId(format!("input `{}`", input.id)));
            }
            if let ParamType::Enum { symbols } = &input.param_type {
                let distinct: HashSet<_> = symbols.iter().collect();
                if symbols.is_empty() || distinct.len() != symbols.len() {
                    return Err(Error::UnsupportedType {
                        input: input.id.clone(),
                        ty: "enum with empty or repeated symbols".into(),
                    });
                }
            }
            if let Some(default) = &input.default {
                if !default.matches(&input.param_type) {
                    return Err(Error::TypeMismatch {
                        input: input.id.clone(),
                        message: format!("default does not match type {}", input.param_type),
                    });
                }
            }
        }
        let mut seen = HashSet::new();
        for output in &self.outputs {
            if !seen.insert(output.id.as_str()) {
                return Err(Error::DuplicateId(format!("output `{}`", output.id)));
            }
        }
        Ok(())
    }

    /// Type-checks `bindings` and fills in defaults. Optional inputs without
    /// a value or default are left out.
    pub fn resolve_bindings(&self, bindings: &Bindings) -> Result<Bindings> {
        if let Some(unknown) = bindings.keys().find(|k| self.input(k).is_none()) {
            return Err(Error::UnknownInput(unknown.clone()));
        }
        let mut resolved = Bindings::new();
        for input in &self.inputs {
            let value = match bindings.get(&input.id).or(input.default.as_ref()) {
                Some(v) => v,
                None if input.required => return Err(Error::MissingRequiredInput(input.id.clone())),
                None => continue,
            };
            if !value.matches(&input.param_type) {
                return Err(Error::TypeMismatch {
                    input: input.id.clone(),
                    message: format!("expected {}, got {}", input.param_type, value.to_arg()),
                });
            }
            resolved.insert(input.id.clone(), value.clone());
        }
        Ok(resolved)
    }

    /// Coerces raw JSON bindings, collecting one message per offending field.
    pub fn coerce_bindings(
        &self,
        raw: &serde_json::Map<String, serde_json::Value>,
    ) -> std::result::Result<Bindings, BTreeMap<String, String>> {
        let mut errors = BTreeMap::new();
        let mut out = Bindings::new();
        for (key, value) in raw {
            match self.input(key) {
                None => {
                    errors.insert(key.clone(), "unknown input".to_string());
                }
                Some(input) => match ParamValue::coerce(&input.param_type, value) {
                    Ok(v) => {
                        out.insert(key.clone(), v);
                    }
                    Err(msg) => {
                        errors.insert(key.clone(), msg);
                    }
                },
            }
        }
        for input in &self.inputs {
            if input.required && input.default.is_none() && !raw.contains_key(&input.id) {
                errors.insert(input.id.clone(), "required input is missing".to_string());
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors)
        }
    }
}

/// Parses a CWL-subset `CommandLineTool` document (YAML or JSON).
pub fn parse_tool(text: &str) -> Result<ToolDescriptor> {
    let doc: Yaml = crate::parse_document(text)?;
    let map = doc.as_mapping().ok_or_else(|| Error::invalid("document is not a mapping"))?;
    check_header(map, "CommandLineTool")?;

    let id = doc_id(map)?;
    let version = map
        .get("version")
        .or_else(|| map.get("s:softwareVersion"))
        .and_then(scalar_string)
        .unwrap_or_else(|| "latest".to_string());
    let label = get_str(map, "label").map(str::to_string);

    let base_command = match map.get("baseCommand") {
        Some(Yaml::String(s)) => vec![s.clone()],
        Some(Yaml::Sequence(items)) => items
            .iter()
            .map(|v| scalar_string(v).ok_or(Error::MissingBaseCommand))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::MissingBaseCommand),
    };

    let image_ref = docker_image(map).unwrap_or_default();

    let mut inputs = Vec::new();
    for (input_id, body) in entries(map.get("inputs"), "inputs")? {
        inputs.push(parse_input(input_id, body)?);
    }
    let mut outputs = Vec::new();
    for (output_id, body) in entries(map.get("outputs"), "outputs")? {
        let glob = body
            .as_mapping()
            .and_then(|m| m.get("outputBinding"))
            .and_then(Yaml::as_mapping)
            .and_then(|m| get_str(m, "glob"))
            .ok_or_else(|| Error::invalid(format!("output `{output_id}` needs outputBinding.glob")))?;
        outputs.push(OutputParameter { id: output_id, glob: glob.to_string() });
    }

    let descriptor = ToolDescriptor { id, version, label, image_ref, base_command, inputs, outputs };
    descriptor.validate()?;
    Ok(descriptor)
}

pub(crate) fn check_header(map: &Mapping, expected_class: &str) -> Result<()> {
    let class = get_str(map, "class").ok_or_else(|| Error::UnknownDocumentClass(String::new()))?;
    if class != expected_class {
        return Err(Error::UnknownDocumentClass(class.to_string()));
    }
    let version = get_str(map, "cwlVersion").ok_or_else(|| Error::UnsupportedCwlVersion(String::new()))?;
    if !SUPPORTED_CWL_VERSIONS.contains(&version) {
        return Err(Error::UnsupportedCwlVersion(version.to_string()));
    }
    Ok(())
}

pub(crate) fn doc_id(map: &Mapping) -> Result<String> {
    get_str(map, "id")
        .map(|s| s.trim_start_matches('#').to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::invalid("document needs a non-empty `id`"))
}

pub(crate) fn get_str<'a>(map: &'a Mapping, key: &str) -> Option<&'a str> {
    map.get(key).and_then(Yaml::as_str)
}

fn scalar_string(v: &Yaml) -> Option<String> {
    match v {
        Yaml::String(s) => Some(s.clone()),
        Yaml::Number(n) => Some(n.to_string()),
        Yaml::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Normalizes CWL's map form (`{id: body}`) and list form (`[{id, ...}]`)
/// into ordered `(id, body)` pairs.
pub(crate) fn entries<'a>(value: Option<&'a Yaml>, what: &str) -> Result<Vec<(String, &'a Yaml)>> {
    match value {
        None | Some(Yaml::Null) => Ok(Vec::new()),
        Some(Yaml::Mapping(m)) => m
            .iter()
            .map(|(k, v)| {
                let key = k.as_str().ok_or_else(|| Error::invalid(format!("non-string key in {what}")))?;
                Ok((key.trim_start_matches('#').to_string(), v))
            })
            .collect(),
        Some(Yaml::Sequence(items)) => items
            .iter()
            .map(|item| {
                let id = item
                    .as_mapping()
                    .and_then(|m| get_str(m, "id"))
                    .ok_or_else(|| Error::invalid(format!("entry in {what} needs an `id`")))?;
                Ok((id.trim_start_matches('#').to_string(), item))
            })
            .collect(),
        Some(_) => Err(Error::invalid(format!("`{what}` must be a mapping or a list"))),
    }
}

fn docker_image(map: &Mapping) -> Option<String> {
    for key in ["requirements", "hints"] {
        match map.get(key) {
            Some(Yaml::Mapping(reqs)) => {
                if let Some(pull) = reqs
                    .get("DockerRequirement")
                    .and_then(Yaml::as_mapping)
                    .and_then(|m| get_str(m, "dockerPull"))
                {
                    return Some(pull.to_string());
                }
            }
            Some(Yaml::Sequence(reqs)) => {
                for req in reqs.iter().filter_map(Yaml::as_mapping) {
                    if get_str(req, "class") == Some("DockerRequirement") {
                        if let Some(pull) = get_str(req, "dockerPull") {
                            return Some(pull.to_string());
                        }
                    }
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a CWL type expression into `(type, required)`.
pub(crate) fn parse_type(input: &str, ty: &Yaml) -> Result<(ParamType, bool)> {
    let unsupported = |t: &str| Error::UnsupportedType { input: input.to_string(), ty: t.to_string() };
    match ty {
        Yaml::String(s) => {
            let (name, required) = match s.strip_suffix('?') {
                Some(base) => (base, false),
                None => (s.as_str(), true),
            };
            let param_type = match name {
                "int" => ParamType::Int,
                "float" => ParamType::Float,
                "string" => ParamType::String,
                "boolean" => ParamType::Boolean,
                "File" => ParamType::File,
                other => return Err(unsupported(other)),
            };
            Ok((param_type, required))
        }
        Yaml::Mapping(m) => match get_str(m, "type") {
            Some("enum") => {
                let symbols = m
                    .get("symbols")
                    .and_then(Yaml::as_sequence)
                    .ok_or_else(|| unsupported("enum without symbols"))?
                    .iter()
                    .map(|s| scalar_string(s).ok_or_else(|| unsupported("enum symbol")))
                    .collect::<Result<Vec<_>>>()?;
                Ok((ParamType::Enum { symbols }, true))
            }
            Some(other) => Err(unsupported(other)),
            None => Err(unsupported("mapping without type")),
        },
        Yaml::Sequence(items) => {
            let non_null: Vec<_> = items.iter().filter(|t| t.as_str() != Some("null")).collect();
            if non_null.len() != 1 {
                return Err(unsupported("union"));
            }
            let (param_type, required) = parse_type(input, non_null[0])?;
            let nullable = non_null.len() < items.len();
            Ok((param_type, required && !nullable))
        }
        _ => Err(unsupported("unrecognized type expression")),
    }
}

fn yaml_to_json(v: &Yaml) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::invalid(e.to_string()))
}

pub(crate) fn parse_input(id: String, body: &Yaml) -> Result<InputParameter> {
    let (ty, map) = match body {
        Yaml::Mapping(m) if m.contains_key("type") => (m.get("type").expect("checked"), Some(m)),
        other => (other, None),
    };
    let (param_type, mut required) = parse_type(&id, ty)?;
    let mut default = None;
    let mut binding = None;
    let mut label = None;
    if let Some(m) = map {
        if let Some(raw) = m.get("default").filter(|v| !v.is_null()) {
            let raw = yaml_to_json(raw)?;
            let value = ParamValue::coerce(&param_type, &raw)
                .map_err(|message| Error::TypeMismatch { input: id.clone(), message })?;
            default = Some(value);
        }
        if let Some(b) = m.get("inputBinding").and_then(Yaml::as_mapping) {
            let position = match b.get("position") {
                None => 0,
                Some(p) => p
                    .as_i64()
                    .ok_or_else(|| Error::invalid(format!("input `{id}`: position must be an integer")))?,
            };
            binding = Some(InputBinding { position, prefix: get_str(b, "prefix").map(str::to_string) });
        }
        label = get_str(m, "label").map(str::to_string);
    }
    if default.is_some() {
        required = false;
    }
    Ok(InputParameter { id, label, param_type, required, default, binding })
}

fn type_to_yaml(p: &InputParameter) -> Yaml {
    let base = match &p.param_type {
        ParamType::Enum { symbols } => {
            let mut m = Mapping::new();
            m.insert("type".into(), "enum".into());
            m.insert("symbols".into(), Yaml::Sequence(symbols.iter().map(|s| s.as_str().into()).collect()));
            return if p.required || p.default.is_some() {
                Yaml::Mapping(m)
            } else {
                Yaml::Sequence(vec!["null".into(), Yaml::Mapping(m)])
            };
        }
        other => other.to_string(),
    };
    if p.required || p.default.is_some() {
        base.into()
    } else {
        format!("{base}?").into()
    }
}

/// Serializes a descriptor back into a CWL document.
pub fn to_cwl_document(tool: &ToolDescriptor) -> Yaml {
    let mut doc = Mapping::new();
    doc.insert("cwlVersion".into(), "v1.2".into());
    doc.insert("class".into(), "CommandLineTool".into());
    doc.insert("id".into(), tool.id.as_str().into());
    doc.insert("version".into(), tool.version.as_str().into());
    if let Some(label) = &tool.label {
        doc.insert("label".into(), label.as_str().into());
    }
    if !tool.image_ref.is_empty() {
        let mut docker = Mapping::new();
        docker.insert("dockerPull".into(), tool.image_ref.as_str().into());
        let mut reqs = Mapping::new();
        reqs.insert("DockerRequirement".into(), Yaml::Mapping(docker));
        doc.insert("requirements".into(), Yaml::Mapping(reqs));
    }
    doc.insert(
        "baseCommand".into(),
        Yaml::Sequence(tool.base_command.iter().map(|s| s.as_str().into()).collect()),
    );
    let inputs = tool
        .inputs
        .iter()
        .map(|p| {
            let mut m = Mapping::new();
            m.insert("id".into(), p.id.as_str().into());
            m.insert("type".into(), type_to_yaml(p));
            if let Some(label) = &p.label {
                m.insert("label".into(), label.as_str().into());
            }
            if let Some(default) = &p.default {
                m.insert("default".into(), serde_yaml::to_value(default).expect("plain value"));
            }
            if let Some(b) = &p.binding {
                let mut bm = Mapping::new();
                bm.insert("position".into(), b.position.into());
                if let Some(prefix) = &b.prefix {
                    bm.insert("prefix".into(), prefix.as_str().into());
                }
                m.insert("inputBinding".into(), Yaml::Mapping(bm));
            }
            Yaml::Mapping(m)
        })
        .collect();
    doc.insert("inputs".into(), Yaml::Sequence(inputs));
    let outputs = tool
        .outputs
        .iter()
        .map(|o| {
            let mut ob = Mapping::new();
            ob.insert("glob".into(), o.glob.as_str().into());
            let mut m = Mapping::new();
            m.insert("id".into(), o.id.as_str().into());
            m.insert("type".into(), "File".into());
            m.insert("outputBinding".into(), Yaml::Mapping(ob));
            Yaml::Mapping(m)
        })
        .collect();
    doc.insert("outputs".into(), Yaml::Sequence(outputs));
    Yaml::Mapping(doc)
}

/// Builds the argument vector for a tool invocation.
///
/// Bound arguments follow `base_command`, ordered by `inputBinding.position`
/// with declaration order breaking ties. Inputs without an `inputBinding`
/// are type-checked but not emitted.
pub fn build_command(tool: &ToolDescriptor, bindings: &Bindings) -> Result<Vec<String>> {
    let resolved = tool.resolve_bindings(bindings)?;
    let mut bound: Vec<(i64, usize, Vec<String>)> = Vec::new();
    for (index, input) in tool.inputs.iter().enumerate() {
        let (Some(binding), Some(value)) = (&input.binding, resolved.get(&input.id)) else {
            continue;
        };
        let args = match value {
            ParamValue::Boolean(true) => binding.prefix.iter().cloned().collect(),
            ParamValue::Boolean(false) => Vec::new(),
            other => binding.prefix.iter().cloned().chain(std::iter::once(other.to_arg())).collect(),
        };
        bound.push((binding.position, index, args));
    }
    bound.sort_by_key(|(position, index, _)| (*position, *index));
    let mut argv = tool.base_command.clone();
    argv.extend(bound.into_iter().flat_map(|(_, _, args)| args));
    Ok(argv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Widget {
    Number,
    Text,
    Checkbox,
    FilePicker,
    Select { options: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormField {
    pub field_id: String,
    pub label: String,
    pub widget: Widget,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormSchema {
    pub tool_id: String,
    pub fields: Vec<FormField>,
}

/// One form field per input, in declaration order.
pub fn render_form_schema(tool: &ToolDescriptor) -> FormSchema {
    let fields = tool
        .inputs
        .iter()
        .map(|input| FormField {
            field_id: input.id.clone(),
            label: input.label.clone().unwrap_or_else(|| input.id.clone()),
            widget: match &input.param_type {
                ParamType::Int | ParamType::Float => Widget::Number,
                ParamType::String => Widget::Text,
                ParamType::Boolean => Widget::Checkbox,
                ParamType::File => Widget::FilePicker,
                ParamType::Enum { symbols } => Widget::Select { options: symbols.clone() },
            },
            required: input.required,
            default: input.default.clone(),
        })
        .collect();
    FormSchema { tool_id: tool.id.clone(), fields }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftwareRecord {
    pub descriptor: ToolDescriptor,
    pub uploaded_at: DateTime<Utc>,
    pub visibility: Visibility,
}

/// Splits `id@version`; a bare id leaves the version open.
pub fn split_tool_ref(reference: &str) -> (&str, Option<&str>) {
    match reference.split_once('@') {
        Some((id, version)) => (id, Some(version)),
        None => (reference, None),
    }
}

/// The software catalog, persisted as one JSON document per tool version
/// under `<state_dir>/tools/<id>@<version>.json`.
#[derive(Debug, Default)]
pub struct Catalog {
    dir: Option<PathBuf>,
    records: RwLock<BTreeMap<(String, String), SoftwareRecord>>,
}

impl Catalog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if necessary) the catalog under `state_dir`.
    pub fn open(state_dir: &Path) -> Result<Self> {
        let dir = state_dir.join("tools");
        fs::create_dir_all(&dir)?;
        let catalog = Self { dir: Some(dir), records: RwLock::default() };
        catalog.refresh()?;
        Ok(catalog)
    }

    /// Reloads records written by other processes.
    pub fn refresh(&self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut loaded = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let record: SoftwareRecord = serde_json::from_slice(&fs::read(&path)?)?;
            let key = (record.descriptor.id.clone(), record.descriptor.version.clone());
            loaded.insert(key, record);
        }
        *self.records.write().expect("catalog lock") = loaded;
        Ok(())
    }

    /// Registers a descriptor; the same id and version replaces the old record.
    pub fn register(&self, descriptor: ToolDescriptor, visibility: Visibility) -> Result<SoftwareRecord> {
        descriptor.validate()?;
        let record = SoftwareRecord { descriptor, uploaded_at: Utc::now(), visibility };
        let mut records = self.records.write().expect("catalog lock");
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", record.descriptor.reference()));
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(&record)?)?;
            fs::rename(&tmp, &path)?;
        }
        let key = (record.descriptor.id.clone(), record.descriptor.version.clone());
        records.insert(key, record.clone());
        Ok(record)
    }

    pub fn list(&self, visibility: Option<Visibility>) -> Vec<SoftwareRecord> {
        self.records
            .read()
            .expect("catalog lock")
            .values()
            .filter(|r| visibility.is_none_or(|v| r.visibility == v))
            .cloned()
            .collect()
    }

    /// Looks up a tool; without a version the most recently uploaded one wins.
    pub fn get(&self, id: &str, version: Option<&str>) -> Option<SoftwareRecord> {
        let records = self.records.read().expect("catalog lock");
        match version {
            Some(v) => records.get(&(id.to_string(), v.to_string())).cloned(),
            None => records
                .values()
                .filter(|r| r.descriptor.id == id)
                .max_by(|a, b| a.uploaded_at.cmp(&b.uploaded_at).then(a.descriptor.version.cmp(&b.descriptor.version)))
                .cloned(),
        }
    }

    /// Resolves `id` or `id@version`, refreshing from disk on a miss.
    pub fn resolve(&self, reference: &str) -> Option<ToolDescriptor> {
        let (id, version) = split_tool_ref(reference);
        if let Some(r) = self.get(id, version) {
            return Some(r.descriptor);
        }
        self.refresh().ok()?;
        self.get(id, version).map(|r| r.descriptor)
    }
}
