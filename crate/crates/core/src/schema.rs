//! Tool schemas: the environment's declared tool contracts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }

    /// Whether a JSON value is acceptable for this declared type. Integers
    /// are accepted where numbers are declared.
    pub fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Number => v.is_number(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::Object => v.is_object(),
            ParamType::Array => v.is_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    #[serde(default)]
    pub returns: String,
}

impl ToolSchema {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn required(&self) -> impl Iterator<Item = &ParamSpec> {
        self.parameters.iter().filter(|p| p.required)
    }

    /// Compact text form for prompts.
    pub fn render(&self) -> String {
        let params = self
            .parameters
            .iter()
            .map(|p| format!("{}: {}{}", p.name, p.ty.as_str(), if p.required { "" } else { " (optional)" }))
            .collect::<Vec<_>>()
            .join(", ");
        format!("{}({params}) -> {}\n  {}", self.name, self.returns, self.description)
    }
}

/// Name-keyed set of tool schemas.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolSchemaSet {
    tools: BTreeMap<String, ToolSchema>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchemaSetError {
    #[error("duplicate tool: {0}")]
    DuplicateTool(String),
    #[error("duplicate parameter {param} on tool {tool}")]
    DuplicateParam { tool: String, param: String },
}

impl ToolSchemaSet {
    pub fn new(list: Vec<ToolSchema>) -> Result<Self, SchemaSetError> {
        let mut tools = BTreeMap::new();
        for t in list {
            let mut seen = std::collections::BTreeSet::new();
            for p in &t.parameters {
                if !seen.insert(p.name.clone()) {
                    return Err(SchemaSetError::DuplicateParam { tool: t.name.clone(), param: p.name.clone() });
                }
            }
            if tools.contains_key(&t.name) {
                return Err(SchemaSetError::DuplicateTool(t.name));
            }
            tools.insert(t.name.clone(), t);
        }
        Ok(Self { tools })
    }

    pub fn get(&self, name: &str) -> Option<&ToolSchema> {
        self.tools.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSchema> {
        self.tools.values()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn to_vec(&self) -> Vec<ToolSchema> {
        self.tools.values().cloned().collect()
    }
}
