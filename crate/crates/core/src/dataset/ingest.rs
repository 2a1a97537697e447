//! Raw-instance assembly from GitHub event records. Events are read from
//! JSONL dumps on disk; the paginated API client is only needed to produce
//! those dumps.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use super::RawInstance;

const CLOSING_KEYWORDS: &[&str] = &[
    "close", "closes", "closed", "fix", "fixes", "fixed", "resolve", "resolves", "resolved",
];

/// Issue numbers a PR text closes via `fixes #N` style references.
pub fn linked_issues(text: &str) -> Vec<u64> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for pair in words.windows(2) {
        let keyword = pair[0].trim_end_matches(':').to_lowercase();
        if !CLOSING_KEYWORDS.contains(&keyword.as_str()) {
            continue;
        }
        let Some(rest) = pair[1].strip_prefix('#') else {
            continue;
        };
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(n) = digits.parse::<u64>() {
            if !out.contains(&n) {
                out.push(n);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssueRecord {
    pub repo: String,
    pub number: u64,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PullRecord {
    pub repo: String,
    pub number: u64,
    pub title: String,
    pub body: String,
    pub base_sha: String,
    pub merged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub issues: BTreeMap<(String, u64), IssueRecord>,
    pub pulls: BTreeMap<(String, u64), PullRecord>,
}

#[derive(Deserialize)]
struct Event {
    #[serde(rename = "type")]
    kind: String,
    repo: EventRepo,
    payload: Value,
}

#[derive(Deserialize)]
struct EventRepo {
    name: String,
}

fn text_field(v: &Value, key: &str) -> String {
    v.get(key).and_then(Value::as_str).unwrap_or_default().to_string()
}

impl EventLog {
    /// Folds `IssuesEvent` and `PullRequestEvent` records; later events for
    /// the same number replace earlier ones. Other event types and malformed
    /// lines are counted and skipped.
    pub fn from_jsonl(text: &str) -> (Self, usize) {
        let mut log = EventLog::default();
        let mut skipped = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(event) = serde_json::from_str::<Event>(line) else {
                skipped += 1;
                continue;
            };
            let repo = event.repo.name;
            match event.kind.as_str() {
                "IssuesEvent" => {
                    let issue = &event.payload["issue"];
                    let Some(number) = issue["number"].as_u64() else {
                        skipped += 1;
                        continue;
                    };
                    log.issues.insert(
                        (repo.clone(), number),
                        IssueRecord {
                            repo,
                            number,
                            title: text_field(issue, "title"),
                            body: text_field(issue, "body"),
                        },
                    );
                }
                "PullRequestEvent" => {
                    let pr = &event.payload["pull_request"];
                    let Some(number) = pr["number"].as_u64() else {
                        skipped += 1;
                        continue;
                    };
                    log.pulls.insert(
                        (repo.clone(), number),
                        PullRecord {
                            repo,
                            number,
                            title: text_field(pr, "title"),
                            body: text_field(pr, "body"),
                            base_sha: text_field(&pr["base"], "sha"),
                            merged: pr["merged"].as_bool().unwrap_or(false),
                        },
                    );
                }
                _ => skipped += 1,
            }
        }
        (log, skipped)
    }

    /// One raw instance per merged PR that closes a known issue and has a
    /// diff in `diffs`. The first linked issue found in the log is used.
    pub fn raw_instances(&self, diffs: &HashMap<(String, u64), String>) -> Vec<RawInstance> {
        let mut out = Vec::new();
        for ((repo, number), pr) in &self.pulls {
            if !pr.merged {
                continue;
            }
            let Some(diff) = diffs.get(&(repo.clone(), *number)) else {
                continue;
            };
            let text = format!("{}\n{}", pr.title, pr.body);
            let Some(issue) = linked_issues(&text)
                .into_iter()
                .find_map(|n| self.issues.get(&(repo.clone(), n)))
            else {
                continue;
            };
            let slug = repo.replace('/', "__");
            out.push(RawInstance {
                instance_id: format!("{slug}-{number}"),
                repo_id: repo.clone(),
                issue_text: format!("{}\n{}", issue.title, issue.body).trim_end().to_string(),
                base_snapshot_ref: format!("{slug}@{}", pr.base_sha),
                gold_patch_text: diff.clone(),
                candidate_test_commands: None,
            });
        }
        out
    }
}

/// URL of the `rel="next"` entry of an HTTP `Link` header.
pub fn next_page_url(link_header: &str) -> Option<String> {
    link_header.split(',').find_map(|part| {
        let mut pieces = part.split(';');
        let url = pieces.next()?.trim();
        let is_next = pieces.any(|p| p.trim().replace(' ', "") == "rel=\"next\"");
        (is_next && url.starts_with('<') && url.ends_with('>')).then(|| url[1..url.len() - 1].to_string())
    })
}

/// How long to pause before the next request given the rate-limit headers
/// (`x-ratelimit-remaining`, `x-ratelimit-reset` as epoch seconds).
pub fn rate_limit_wait(remaining: Option<&str>, reset: Option<&str>, now_epoch: u64) -> Option<Duration> {
    let remaining: u64 = remaining?.trim().parse().ok()?;
    if remaining > 0 {
        return None;
    }
    let reset: u64 = reset?.trim().parse().ok()?;
    Some(Duration::from_secs(reset.saturating_sub(now_epoch) + 1))
}

/// A fetched page: body plus the headers pagination and throttling need.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Page {
    pub body: String,
    pub link: Option<String>,
    pub ratelimit_remaining: Option<String>,
    pub ratelimit_reset: Option<String>,
}

pub trait PageSource {
    fn fetch(&mut self, url: &str) -> Result<Page, String>;
    fn sleep(&mut self, duration: Duration) {
        std::thread::sleep(duration);
    }
    fn now_epoch(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// Follows `next` links from `start`, honouring rate limits, for at most
/// `max_pages` pages.
pub fn fetch_all_pages(source: &mut dyn PageSource, start: &str, max_pages: usize) -> Result<Vec<String>, String> {
    let mut bodies = Vec::new();
    let mut url = Some(start.to_string());
    while let Some(current) = url.take() {
        if bodies.len() == max_pages {
            break;
        }
        let page = source.fetch(&current)?;
        if let Some(wait) = rate_limit_wait(
            page.ratelimit_remaining.as_deref(),
            page.ratelimit_reset.as_deref(),
            source.now_epoch(),
        ) {
            source.sleep(wait);
        }
        url = page.link.as_deref().and_then(next_page_url);
        bodies.push(page.body);
    }
    Ok(bodies)
}

/// Blocking GitHub REST client.
pub struct GithubClient {
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl GithubClient {
    pub fn new(token: Option<String>) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .user_agent("issuefix-ingest")
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(GithubClient { client, token })
    }
}

impl PageSource for GithubClient {
    fn fetch(&mut self, url: &str) -> Result<Page, String> {
        let mut req = self.client.get(url).header("Accept", "application/vnd.github+json");
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
        let link = header("link");
        let ratelimit_remaining = header("x-ratelimit-remaining");
        let ratelimit_reset = header("x-ratelimit-reset");
        let status = resp.status();
        let body = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {body}"));
        }
        Ok(Page {
            body,
            link,
            ratelimit_remaining,
            ratelimit_reset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_references() {
        assert_eq!(linked_issues("Fixes #12 and closes #7; see #3"), [12, 7]);
        assert_eq!(linked_issues("resolved: #4."), [4]);
        assert_eq!(linked_issues("mentions #5 only"), Vec::<u64>::new());
        assert_eq!(linked_issues("fix #9, fix #9"), [9]);
    }

    const EVENTS: &str = r#"{"type":"IssuesEvent","repo":{"name":"acme/w"},"payload":{"action":"opened","issue":{"number":3,"title":"Crash","body":"It crashes."}}}
{"type":"PullRequestEvent","repo":{"name":"acme/w"},"payload":{"action":"closed","pull_request":{"number":8,"title":"Fix crash","body":"Fixes #3","merged":true,"base":{"sha":"abc"}}}}
{"type":"PullRequestEvent","repo":{"name":"acme/w"},"payload":{"action":"closed","pull_request":{"number":9,"title":"Other","body":"Fixes #3","merged":false,"base":{"sha":"abc"}}}}
{"type":"WatchEvent","repo":{"name":"acme/w"},"payload":{}}
not json
"#;

    #[test]
    fn assembles_instances_from_events() {
        let (log, skipped) = EventLog::from_jsonl(EVENTS);
        assert_eq!(skipped, 2);
        let mut diffs = HashMap::new();
        diffs.insert(("acme/w".to_string(), 8), "diff".to_string());
        diffs.insert(("acme/w".to_string(), 9), "diff".to_string());
        let raws = log.raw_instances(&diffs);
        assert_eq!(raws.len(), 1);
        assert_eq!(raws[0].instance_id, "acme__w-8");
        assert_eq!(raws[0].issue_text, "Crash\nIt crashes.");
        assert_eq!(raws[0].base_snapshot_ref, "acme__w@abc");
    }

    #[test]
    fn link_header_pagination() {
        let h = r#"<https://api.github.com/x?page=2>; rel="next", <https://api.github.com/x?page=5>; rel="last""#;
        assert_eq!(next_page_url(h).unwrap(), "https://api.github.com/x?page=2");
        assert_eq!(next_page_url(r#"<https://a/x?page=1>; rel="prev""#), None);
    }

    #[test]
    fn rate_limit_parsing() {
        assert_eq!(rate_limit_wait(Some("10"), Some("100"), 50), None);
        assert_eq!(rate_limit_wait(Some("0"), Some("100"), 50), Some(Duration::from_secs(51)));
        assert_eq!(rate_limit_wait(Some("0"), Some("10"), 50), Some(Duration::from_secs(1)));
        assert_eq!(rate_limit_wait(None, Some("10"), 50), None);
    }

    struct Recorded {
        pages: HashMap<String, Page>,
        slept: Vec<Duration>,
    }

    impl PageSource for Recorded {
        fn fetch(&mut self, url: &str) -> Result<Page, String> {
            self.pages.get(url).cloned().ok_or_else(|| format!("no fixture for {url}"))
        }
        fn sleep(&mut self, d: Duration) {
            self.slept.push(d);
        }
        fn now_epoch(&self) -> u64 {
            1000
        }
    }

    #[test]
    fn follows_recorded_pages() {
        let mut pages = HashMap::new();
        pages.insert(
            "u1".to_string(),
            Page {
                body: "[1]".into(),
                link: Some(r#"<u2>; rel="next""#.into()),
                ratelimit_remaining: Some("0".into()),
                ratelimit_reset: Some("1004".into()),
            },
        );
        pages.insert(
            "u2".to_string(),
            Page {
                body: "[2]".into(),
                ..Default::default()
            },
        );
        let mut src = Recorded { pages, slept: vec![] };
        assert_eq!(fetch_all_pages(&mut src, "u1", 10).unwrap(), ["[1]", "[2]"]);
        assert_eq!(src.slept, [Duration::from_secs(5)]);
        assert_eq!(fetch_all_pages(&mut src, "u1", 1).unwrap(), ["[1]"]);
    }
}
