use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use ilf_core::annotation::{
    accept_record, edit_distance_ratio, read_records, AnnotationService, ItemStatus, QueueItem, QueueSnapshot,
    RejectReason, SubmissionReceipt, Verdict,
};
use ilf_core::model::{render_task, ProgramOrigin, ProgramSample, SamplingInfo, Task};
use ilf_core::sandbox::{EvalOutcome, FailureKind, SandboxConfig, TestResult};
use ilf_service::{serve, EditDistanceResponse, ErrorBody, ReviewResponse, ANNOTATOR_HEADER};
use reqwest::StatusCode;
use serde_json::json;

fn failing(task_id: u32, text: &str) -> ProgramSample {
    let mut p = ProgramSample::new(
        format!("t{task_id}-s0"),
        task_id,
        text,
        ProgramOrigin::BaseModel,
        "base",
        SamplingInfo {
            temperature: 0.8,
            index: 0,
        },
    )
    .unwrap();
    p.eval = Some(EvalOutcome {
        passed: false,
        failure_kind: Some(FailureKind::AssertionFailure),
        duration: Duration::ZERO,
        per_test: vec![TestResult {
            test_index: 0,
            passed: false,
            message: "AssertionError".into(),
        }],
    });
    p
}

const ADD_BUG: &str = "def add(a, b):\n    return a - b";
const ADD_FIX: &str = "def add(a, b):\n    return a + b";

fn service() -> AnnotationService {
    let tasks = [
        Task::new(
            400,
            "Write a function mul(a, b) that multiplies two numbers.",
            vec!["assert mul(2, 3) == 6".into(), "assert mul(0, 5) == 0".into()],
        )
        .unwrap(),
        Task::new(
            311,
            "Write a function add(a, b) that adds two numbers.",
            vec!["assert add(1, 2) == 3".into(), "assert add(2, 2) == 4".into()],
        )
        .unwrap(),
    ];
    let rendered: BTreeMap<_, _> = tasks.iter().map(|t| (t.id, render_task(t))).collect();
    let pool = [
        failing(400, "def mul(a, b):\n    return a + b"),
        failing(311, ADD_BUG),
    ];
    AnnotationService::from_pool(&rendered, &pool, SandboxConfig::default().with_timeout(Duration::from_secs(5)))
        .unwrap()
}

struct Server {
    base: String,
    client: reqwest::Client,
}

impl Server {
    async fn start() -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(serve(listener, Arc::new(service())));
        Server {
            base,
            client: reqwest::Client::new(),
        }
    }

    fn post(&self, path: &str, who: Option<&str>) -> reqwest::RequestBuilder {
        let req = self.client.post(format!("{}{path}", self.base));
        match who {
            Some(who) => req.header(ANNOTATOR_HEADER, who),
            None => req,
        }
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(format!("{}{path}", self.base)).send().await.unwrap()
    }
}

async fn error_kind(resp: reqwest::Response) -> (StatusCode, String) {
    let status = resp.status();
    let body: ErrorBody = resp.json().await.unwrap();
    (status, body.kind)
}

fn submit_body(feedback: &str, refinement: &str) -> serde_json::Value {
    json!({
        "program_index": 0,
        "feedback_text": feedback,
        "refinement_text": refinement,
        "bug_tags": ["algebra"],
        "bugs_addressed": 1
    })
}

#[tokio::test(flavor = "multi_thread")]
async fn annotation_round_trip() {
    let srv = Server::start().await;
    let queue: QueueSnapshot = srv.get("/queue").await.json().await.unwrap();
    assert_eq!(queue.items.iter().map(|i| i.task_id).collect::<Vec<_>>(), [311, 400]);

    let item: QueueItem = srv.post("/queue/next", Some("ann")).send().await.unwrap().json().await.unwrap();
    assert_eq!(item.task_id(), 311);
    assert_eq!(item.status, ItemStatus::Claimed);
    assert_eq!(item.failing_programs[0].program_text, ADD_BUG);

    let outcome: EvalOutcome = srv
        .post("/queue/311/run-tests", None)
        .json(&json!({"program_text": ADD_BUG}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(!outcome.passed);
    assert_eq!(outcome.per_test.len(), 1);

    let gauge: EditDistanceResponse = srv
        .post("/edit-distance", None)
        .json(&json!({"original": ADD_BUG, "draft": ADD_FIX}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(gauge.distance, 1);
    assert_eq!(gauge.ratio, edit_distance_ratio(ADD_FIX, ADD_BUG));

    let receipt: SubmissionReceipt = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&submit_body("Use + instead of -.", ADD_FIX))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(receipt.eval.passed);
    assert_eq!(receipt.status, ItemStatus::Submitted);
    assert_eq!(receipt.verdict, Verdict::Reject(RejectReason::Unverified));
    assert_eq!(receipt.edit_distance, 1);

    let reviewed: ReviewResponse = srv
        .post("/queue/311/review", None)
        .json(&json!({"verified": true}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(reviewed.verdict, Verdict::Accept);
    let item: QueueItem = srv.get("/queue/311").await.json().await.unwrap();
    assert_eq!(item.status, ItemStatus::Accepted);

    let export = srv.get("/export").await;
    assert_eq!(export.headers()["content-type"], "application/x-ndjson");
    let records = read_records(export.bytes().await.unwrap().as_ref()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].annotation.feedback_text, "Use + instead of -.");
    assert_eq!(accept_record(&records[0]).unwrap(), Verdict::Accept);
    assert!(records[0].timing.is_some());
}

#[tokio::test(flavor = "multi_thread")]
async fn claims_conflict_and_next_skips_claimed_items() {
    let srv = Server::start().await;
    let ok = srv.post("/queue/311/claim", Some("alice")).send().await.unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    let clash = srv.post("/queue/311/claim", Some("bob")).send().await.unwrap();
    assert_eq!(error_kind(clash).await, (StatusCode::CONFLICT, "conflict".into()));

    let item: QueueItem = srv.post("/queue/next", Some("bob")).send().await.unwrap().json().await.unwrap();
    assert_eq!(item.task_id(), 400);
    let none = srv.post("/queue/next", Some("carol")).send().await.unwrap();
    assert_eq!(none.status(), StatusCode::NO_CONTENT);

    let released = srv.post("/queue/311/release", Some("alice")).send().await.unwrap();
    assert_eq!(released.status(), StatusCode::OK);
    let item: QueueItem = srv.post("/queue/next", Some("carol")).send().await.unwrap().json().await.unwrap();
    assert_eq!(item.task_id(), 311);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_claims_have_one_winner() {
    let srv = Arc::new(Server::start().await);
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let srv = srv.clone();
            tokio::spawn(async move {
                srv.post("/queue/400/claim", Some(&format!("a{i}")))
                    .send()
                    .await
                    .unwrap()
                    .status()
            })
        })
        .collect();
    let mut statuses = Vec::new();
    for h in handles {
        statuses.push(h.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1);
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 7);
}

#[tokio::test(flavor = "multi_thread")]
async fn request_errors_map_to_statuses() {
    let srv = Server::start().await;
    let unclaimed = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&submit_body("fix", ADD_FIX))
        .send()
        .await
        .unwrap();
    assert_eq!(error_kind(unclaimed).await, (StatusCode::CONFLICT, "invalid_state".into()));

    let anonymous = srv.post("/queue/311/claim", None).send().await.unwrap();
    assert_eq!(error_kind(anonymous).await, (StatusCode::BAD_REQUEST, "validation".into()));

    let unknown = srv.get("/queue/999").await;
    assert_eq!(error_kind(unknown).await, (StatusCode::NOT_FOUND, "not_found".into()));

    srv.post("/queue/311/claim", Some("ann")).send().await.unwrap();
    let empty = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&submit_body("  ", ADD_FIX))
        .send()
        .await
        .unwrap();
    assert_eq!(error_kind(empty).await, (StatusCode::BAD_REQUEST, "validation".into()));

    let bad_index = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&json!({"program_index": 3, "feedback_text": "f", "refinement_text": ADD_FIX}))
        .send()
        .await
        .unwrap();
    assert_eq!(error_kind(bad_index).await, (StatusCode::BAD_REQUEST, "validation".into()));

    let review_early = srv
        .post("/queue/311/review", None)
        .json(&json!({"verified": true}))
        .send()
        .await
        .unwrap();
    assert_eq!(error_kind(review_early).await, (StatusCode::CONFLICT, "invalid_state".into()));
}

#[tokio::test(flavor = "multi_thread")]
async fn failing_refinement_keeps_the_claim() {
    let srv = Server::start().await;
    srv.post("/queue/311/claim", Some("ann")).send().await.unwrap();
    let receipt: SubmissionReceipt = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&submit_body("Multiply instead.", "def add(a, b):\n    return a * b + 1"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(receipt.verdict, Verdict::Reject(RejectReason::TestsFailed));
    assert_eq!(receipt.status, ItemStatus::Claimed);

    let rewrite = "def add(first, second):\n    total = first\n    total += second\n    return total";
    let receipt: SubmissionReceipt = srv
        .post("/queue/311/submit", Some("ann"))
        .json(&submit_body("Rewrite it.", rewrite))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(receipt.eval.passed);
    assert!(matches!(receipt.verdict, Verdict::Reject(RejectReason::TooManyEdits { .. })));
    assert_eq!(receipt.status, ItemStatus::Claimed);
    let item: QueueItem = srv.get("/queue/311").await.json().await.unwrap();
    assert_eq!(item.attempts, 2);
}
