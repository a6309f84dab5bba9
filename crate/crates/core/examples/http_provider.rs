//! Sends one trial through the HTTP adapter to a local chat-completions
//! stub, with a rate limit and a retried 503.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use srct::dispatch::{Dispatcher, ProviderConfig, ProviderFamily, RetryPolicy, SystemClock};
use srct::population::{sample_population, DemographicSpec};
use srct::{design, fixtures, pipeline};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |Json(body): Json<Value>| {
            let counter = counter.clone();
            async move {
                if counter.fetch_add(1, Ordering::SeqCst) == 0 {
                    return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
                }
                let n = body["messages"].as_array().map_or(0, Vec::len);
                let text = format!("I read {n} messages. Consent: 3. Significance: 5.");
                (StatusCode::OK, Json(json!({"choices": [{"message": {"content": text}, "finish_reason": "stop"}]})))
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base_url = format!("http://{}", listener.local_addr()?);
    tokio::spawn(async move { axum::serve(listener, app).await });

    let config = ProviderConfig {
        provider_id: "local".into(),
        family: ProviderFamily::OpenaiChat,
        base_url,
        path: "/v1/chat/completions".into(),
        model: "stub-model".into(),
        auth_env: None,
        max_concurrent: 2,
        requests_per_minute: Some(600.0),
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_base_secs: 0.05,
        },
        ..ProviderConfig::mock("local")
    };
    let dispatcher = Dispatcher::with_http_providers(Arc::new(SystemClock), 1, vec![config])?;

    let mut spec = fixtures::STUDY3.source()?.spec;
    spec.models = vec!["local".into()];
    let personas = sample_population(&DemographicSpec::us_adults(), 1)?;
    let plans = design::plan(&spec, &personas)?;
    let jobs = pipeline::build_jobs(&spec, &plans, &personas)?;
    let record = dispatcher.run_trial(&jobs[0]).await?;
    println!("{:?} after {} attempt(s): {}", record.outcome, record.attempts, record.completion);
    println!("server saw {} request(s)", calls.load(Ordering::SeqCst));
    Ok(())
}
