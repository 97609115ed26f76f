//! Talk to the external services over HTTP.
//!
//! Set any of these to try a live endpoint:
//!
//! ```sh
//! FEATURES_URL=http://localhost:8080 SCORER_URL=http://localhost:8081 \
//!   CHAT_URL=https://api.example.com/v1/chat/completions CHAT_MODEL=some-model CHAT_KEY=... \
//!   cargo run --example service_clients
//! ```

use mia_audit::corpus::parse_sectioned_document;
use mia_audit::http::{ChatCompletion, ChatTagger, HttpEndpoint, ServiceFeatureProvider, ServiceTokenScorer};
use mia_audit::metrics::FeatureProvider;
use mia_audit::redaction::extract_facts;
use mia_audit::retry::RetryPolicy;
use mia_audit::scoring::TokenScorer;

const TEXT: &str = "Halden Works hired 40 people in March 2021.";

fn main() -> mia_audit::Result<()> {
    let env = |k: &str| std::env::var(k).ok();
    let mut any = false;

    if let Some(url) = env("FEATURES_URL") {
        any = true;
        let provider = ServiceFeatureProvider::new(HttpEndpoint::new(url), RetryPolicy::default());
        let v = provider.fetch(&[TEXT])?;
        println!("features: dim {} nnz {}", v[0].dim(), v[0].nnz());
    }
    if let Some(url) = env("SCORER_URL") {
        any = true;
        let scorer = ServiceTokenScorer::new(HttpEndpoint::new(url), RetryPolicy::default());
        let tokens = scorer.score(TEXT, None, true)?;
        println!("scored {} tokens; first {:?}", tokens.len(), tokens.first());
    }
    if let Some(url) = env("CHAT_URL") {
        any = true;
        let mut endpoint = HttpEndpoint::new(url);
        endpoint.model = env("CHAT_MODEL");
        endpoint.api_key = env("CHAT_KEY");
        println!("{endpoint:?}");
        let tagger = ChatTagger::new(ChatCompletion::new(endpoint, RetryPolicy::default()));
        let doc = parse_sectioned_document("live", &format!("<section type=\"narrative\">{TEXT}</section>"))?;
        println!("anchors: {:?}", extract_facts(&doc, &tagger, 3)?);
    }
    if !any {
        println!("no endpoints configured; see the module docs for the variables to set");
    }
    Ok(())
}
