//! Task commands against a running service.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use crate::config::CliConfig;
use crate::{parse_binding, CliError, Output, SubmitArgs};

fn http() -> Result<reqwest::Client, CliError> {
    reqwest::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| CliError::System(format!("cannot build HTTP client: {e}")))
}

/// Sends a request and decodes the body; 4xx maps to a user error with the
/// service's message, everything else that fails to a system error.
async fn call(config: &CliConfig, req: reqwest::RequestBuilder) -> Result<Value, CliError> {
    let resp = req
        .send()
        .await
        .map_err(|e| CliError::System(format!("cannot reach service at {}: {e}", config.api_url)))?;
    let status = resp.status();
    let body: Value = resp
        .json()
        .await
        .map_err(|e| CliError::System(format!("malformed response from {}: {e}", config.api_url)))?;
    if status.is_success() {
        return Ok(body);
    }
    let mut message = body["message"].as_str().unwrap_or("request failed").to_string();
    if let Some(fields) = body["fields"].as_object() {
        for (k, v) in fields {
            message.push_str(&format!("\n  {k}: {}", v.as_str().unwrap_or_default()));
        }
    }
    if status.is_client_error() {
        Err(CliError::User(message))
    } else {
        Err(CliError::System(format!("HTTP {status}: {message}")))
    }
}

pub(crate) async fn submit(config: &CliConfig, args: SubmitArgs) -> Result<Output, CliError> {
    let mut bindings = serde_json::Map::new();
    for raw in &args.inputs {
        let (k, v) = parse_binding(raw)?;
        bindings.insert(k, v);
    }
    let mut tags = BTreeMap::new();
    for raw in &args.tags {
        let (k, v) = raw.split_once('=').ok_or_else(|| CliError::User(format!("expected key=value tag, got `{raw}`")))?;
        tags.insert(k.to_string(), v.to_string());
    }
    let mut body = json!({ "tool_id": args.tool, "bindings": bindings, "tags": tags });
    if args.cpu.is_some() || args.mem.is_some() {
        body["resource_request"] = json!({ "cpu_cores": args.cpu.unwrap_or(0.0), "memory_mb": args.mem.unwrap_or(0) });
    }
    let resp = call(config, http()?.post(format!("{}/v1/tasks", config.api_url)).json(&body)).await?;
    let id = resp["id"].as_str().unwrap_or_default().to_string();
    Ok(Output::new(json!({ "id": id }), id))
}

pub(crate) async fn status(config: &CliConfig, id: &str, full: bool) -> Result<Output, CliError> {
    let view = if full { "FULL" } else { "MINIMAL" };
    let url = format!("{}/v1/tasks/{id}", config.api_url);
    let task = call(config, http()?.get(url).query(&[("view", view)])).await?;
    let state = task["state"].as_str().unwrap_or("UNKNOWN");
    let text = if full { serde_json::to_string_pretty(&task).expect("json") } else { format!("{id}  {state}") };
    Ok(Output::new(task, text))
}

pub(crate) async fn cancel(config: &CliConfig, id: &str) -> Result<Output, CliError> {
    let url = format!("{}/v1/tasks/{id}:cancel", config.api_url);
    let resp = call(config, http()?.post(url)).await?;
    let state = resp["state"].as_str().unwrap_or("UNKNOWN").to_string();
    Ok(Output::new(resp, format!("{id}  {state}")))
}
