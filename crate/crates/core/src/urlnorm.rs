//! URL canonicalization for state identity.
//!
//! Two observations can only describe the same state if their URLs agree
//! after normalization, so this has to be deterministic and idempotent:
//! scheme/host lowercased, fragment dropped, query parameters sorted, and
//! tracking parameters removed per a configurable drop-list.

use std::collections::BTreeSet;

use thiserror::Error;
use url::Url;

#[derive(Debug, Error)]
pub enum UrlError {
    #[error("unparsable url {url:?}: {source}")]
    Unparsable {
        url: String,
        #[source]
        source: url::ParseError,
    },
}

/// Which query parameters count as non-essential and get dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UrlNormConfig {
    /// Parameter names dropped on exact (case-insensitive) match.
    pub drop_exact: BTreeSet<String>,
    /// Parameter name prefixes dropped on case-insensitive match.
    pub drop_prefixes: Vec<String>,
}

impl Default for UrlNormConfig {
    /// Drops `utm_*` plus common session/tracking/timestamp parameters.
    fn default() -> Self {
        UrlNormConfig {
            drop_exact: ["sid", "sessionid", "ref", "fbclid", "gclid", "t", "ts"]
                .into_iter()
                .map(str::to_owned)
                .collect(),
            drop_prefixes: vec!["utm_".into()],
        }
    }
}

impl UrlNormConfig {
    /// Keep every parameter; useful when a corpus relies on exotic keys.
    pub fn keep_all() -> Self {
        UrlNormConfig { drop_exact: BTreeSet::new(), drop_prefixes: Vec::new() }
    }

    fn drops(&self, key: &str) -> bool {
        let key = key.to_ascii_lowercase();
        self.drop_exact.contains(&key)
            || self.drop_prefixes.iter().any(|p| key.starts_with(p.as_str()))
    }
}

/// Canonicalize a raw URL string.
///
/// Idempotent: `normalize_url(&normalize_url(u)?)? == normalize_url(u)?`.
pub fn normalize_url(raw: &str, cfg: &UrlNormConfig) -> Result<String, UrlError> {
    let mut parsed = Url::parse(raw).map_err(|source| UrlError::Unparsable {
        url: raw.to_owned(),
        source,
    })?;

    parsed.set_fragment(None);

    let mut params: Vec<(String, String)> = parsed
        .query_pairs()
        .filter(|(k, _)| !cfg.drops(k))
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    params.sort();
    if params.is_empty() {
        parsed.set_query(None);
    } else {
        let mut serializer = url::form_urlencoded::Serializer::new(String::new());
        serializer.extend_pairs(params.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        parsed.set_query(Some(&serializer.finish()));
    }

    let path = parsed.path().to_owned();
    if path.len() > 1 && path.ends_with('/') {
        parsed.set_path(path.trim_end_matches('/'));
    }

    // Url::parse already lowercases scheme and host and strips default ports.
    Ok(parsed.to_string())
}
