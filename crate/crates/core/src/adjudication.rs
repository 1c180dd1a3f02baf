//! Selection of one candidate set among competing expert outputs.
//!
//! Requests are serialized as structured records. A live endpoint gets at
//! most two attempts; after that the declared fallback label wins, so the
//! pipeline always terminates with a label that exists in the request.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_iou, BinaryMask, DefectCategory, Detection, ImageRef};

pub const DETECTION_FALLBACK: &str = "intersection";
pub const SEGMENTATION_FALLBACK: &str = "bbox-prompt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjudicationTask {
    Detection,
    Segmentation,
}

impl AdjudicationTask {
    pub fn default_fallback(self) -> &'static str {
        match self {
            AdjudicationTask::Detection => DETECTION_FALLBACK,
            AdjudicationTask::Segmentation => SEGMENTATION_FALLBACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidatePayload {
    Detections(Vec<Detection>),
    Masks(Vec<BinaryMask>),
}

impl CandidatePayload {
    fn task(&self) -> AdjudicationTask {
        match self {
            CandidatePayload::Detections(_) => AdjudicationTask::Detection,
            CandidatePayload::Masks(_) => AdjudicationTask::Segmentation,
        }
    }

    fn len(&self) -> usize {
        match self {
            CandidatePayload::Detections(d) => d.len(),
            CandidatePayload::Masks(m) => m.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub label: String,
    pub payload: CandidatePayload,
}

impl CandidateSet {
    pub fn new(label: impl Into<String>, payload: CandidatePayload) -> Self {
        Self {
            label: label.into(),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjudicationRequest {
    pub image: ImageRef,
    pub candidates: Vec<CandidateSet>,
    pub context: String,
    pub task: AdjudicationTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Endpoint,
    Fallback,
    Bypass,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub chosen: String,
    pub rationale: String,
    pub source: VerdictSource,
}

fn glossary() -> String {
    let mut s = String::from("Defect categories:");
    for c in DefectCategory::ALL {
        s.push_str("\n- ");
        s.push_str(c.as_str());
        s.push_str(": ");
        s.push_str(c.gloss());
    }
    s
}

/// Validates the candidates and attaches the category glossary to the context.
pub fn build_request(image: ImageRef, candidates: Vec<CandidateSet>, context: &str) -> Result<AdjudicationRequest> {
    let first = candidates.first().ok_or(Error::Empty("candidate list"))?;
    let task = first.payload.task();
    let mut seen = BTreeSet::new();
    for c in &candidates {
        if c.payload.task() != task {
            return Err(Error::MixedPayload);
        }
        if !seen.insert(c.label.as_str()) {
            return Err(Error::DuplicateLabel(c.label.clone()));
        }
    }
    if context.trim().is_empty() {
        return Err(Error::Empty("context"));
    }
    let context = alloc::format!("{}\n\n{}", context.trim_end(), glossary());
    Ok(AdjudicationRequest {
        image,
        candidates,
        context,
        task,
    })
}

impl AdjudicationRequest {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.label.as_str())
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels().any(|l| l == label)
    }

    pub fn candidate(&self, label: &str) -> Option<&CandidateSet> {
        self.candidates.iter().find(|c| c.label == label)
    }

    /// JSON body sent to an adjudicator endpoint.
    pub fn wire_body(&self) -> Value {
        let candidates: Vec<Value> = self
            .candidates
            .iter()
            .map(|c| {
                let mut record = json!({ "label": c.label, "count": c.payload.len() });
                match &c.payload {
                    CandidatePayload::Detections(dets) => {
                        let mean = if dets.is_empty() {
                            Value::Null
                        } else {
                            json!(dets.iter().map(|d| d.confidence).sum::<f64>() / dets.len() as f64)
                        };
                        record["mean_confidence"] = mean;
                        record["detections"] = dets
                            .iter()
                            .map(|d| {
                                json!({
                                    "x": d.bbox.x, "y": d.bbox.y, "w": d.bbox.w, "h": d.bbox.h,
                                    "category": d.category, "confidence": d.confidence,
                                })
                            })
                            .collect();
                    }
                    CandidatePayload::Masks(masks) => {
                        record["mean_confidence"] = Value::Null;
                        record["mask_rle"] = masks.iter().map(|m| json!(m.to_rle())).collect();
                    }
                }
                record
            })
            .collect();
        json!({
            "task": "adjudicate",
            "mode": self.task,
            "image": {
                "id": self.image.id,
                "uri": self.image.uri,
                "width": self.image.width,
                "height": self.image.height,
            },
            "context": self.context,
            "candidates": candidates,
        })
    }
}

#[derive(Deserialize)]
struct VerdictRecord {
    chosen: String,
    #[serde(default)]
    rationale: String,
}

/// Extracts the first well-formed `{chosen, rationale}` record from a reply.
pub fn parse_verdict(raw: &str, request: &AdjudicationRequest) -> Result<Verdict> {
    if raw.trim().is_empty() {
        return Err(Error::Parse("empty reply".into()));
    }
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<VerdictRecord>();
        if let Some(Ok(record)) = stream.next() {
            if !request.has_label(&record.chosen) {
                return Err(Error::UnknownLabel(record.chosen));
            }
            return Ok(Verdict {
                chosen: record.chosen,
                rationale: record.rationale,
                source: VerdictSource::Endpoint,
            });
        }
    }
    Err(Error::Parse("no verdict record in reply".into()))
}

/// Why an endpoint call produced no usable reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointFailure(pub String);

/// A live adjudicator: takes the serialized request, returns the raw reply.
pub trait VerdictEndpoint {
    fn call(&mut self, body: &str) -> core::result::Result<String, EndpointFailure>;
}

impl<F> VerdictEndpoint for F
where
    F: FnMut(&str) -> core::result::Result<String, EndpointFailure>,
{
    fn call(&mut self, body: &str) -> core::result::Result<String, EndpointFailure> {
        self(body)
    }
}

/// Attempts per live adjudication before the fallback is taken.
pub const MAX_ATTEMPTS: usize = 2;

/// Resolves a request through bypass, the endpoint, or the fallback label.
///
/// `endpoint = None` means the adjudicator is disabled. Failures never
/// surface; the only error is a fallback label missing from the request.
pub fn adjudicate(
    request: &AdjudicationRequest,
    endpoint: Option<&mut dyn VerdictEndpoint>,
    fallback_label: &str,
) -> Result<Verdict> {
    if !request.has_label(fallback_label) {
        return Err(Error::UnknownLabel(fallback_label.into()));
    }
    if request.candidates.len() == 1 {
        return Ok(Verdict {
            chosen: request.candidates[0].label.clone(),
            rationale: "single candidate".into(),
            source: VerdictSource::Bypass,
        });
    }
    let mut last_failure = String::from("adjudicator disabled");
    if let Some(endpoint) = endpoint {
        let body = request.wire_body().to_string();
        for _ in 0..MAX_ATTEMPTS {
            match endpoint.call(&body) {
                Ok(reply) => match parse_verdict(&reply, request) {
                    Ok(v) => return Ok(v),
                    Err(e) => last_failure = e.to_string(),
                },
                Err(EndpointFailure(e)) => last_failure = e,
            }
        }
    }
    Ok(Verdict {
        chosen: fallback_label.into(),
        rationale: alloc::format!("fallback: {last_failure}"),
        source: VerdictSource::Fallback,
    })
}

fn best_match(a: &CandidatePayload, i: usize, other: &CandidatePayload) -> f64 {
    match (a, other) {
        (CandidatePayload::Detections(x), CandidatePayload::Detections(y)) => y
            .iter()
            .filter(|d| d.category == x[i].category)
            .map(|d| box_iou(&x[i].bbox, &d.bbox))
            .fold(0.0, f64::max),
        (CandidatePayload::Masks(x), CandidatePayload::Masks(y)) => y
            .iter()
            .filter_map(|m| mask_iou(&x[i], m).ok())
            .fold(0.0, f64::max),
        _ => 0.0,
    }
}

/// Mean best-match IoU of `a`'s elements against `b`.
pub fn agreement(a: &CandidatePayload, b: &CandidatePayload) -> f64 {
    match (a.len(), b.len()) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        (n, _) => (0..n).map(|i| best_match(a, i, b)).sum::<f64>() / n as f64,
    }
}

/// Deterministic stand-in for a multimodal adjudicator: picks the candidate
/// that agrees most with its peers, ties going to the smallest label.
pub fn mock_adjudicate(request: &AdjudicationRequest) -> Verdict {
    let mut order: Vec<&CandidateSet> = request.candidates.iter().collect();
    order.sort_by(|a, b| a.label.cmp(&b.label));
    let mut best: Option<(&str, f64)> = None;
    for (i, c) in order.iter().enumerate() {
        let peers = order.len() - 1;
        let score = if peers == 0 {
            1.0
        } else {
            order
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| agreement(&c.payload, &p.payload))
                .sum::<f64>()
                / peers as f64
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((&c.label, score));
        }
    }
    let (chosen, score) = best.expect("requests hold at least one candidate");
    Verdict {
        chosen: chosen.into(),
        rationale: alloc::format!("mean peer agreement {score:.4}"),
        source: VerdictSource::Mock,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use alloc::vec;

    fn det(x: f64, c: DefectCategory) -> Detection {
        Detection::new(BoundingBox::new(x, 0., 10., 10.).unwrap(), c, 0.8, "e").unwrap()
    }

    fn image() -> ImageRef {
        ImageRef::new("img1", "img1.png", 64, 64).unwrap()
    }

    fn dets(label: &str, d: Vec<Detection>) -> CandidateSet {
        CandidateSet::new(label, CandidatePayload::Detections(d))
    }

    fn three() -> AdjudicationRequest {
        build_request(
            image(),
            vec![
                dets("union", vec![det(0., DefectCategory::Crack)]),
                dets("intersection", vec![det(0., DefectCategory::Crack)]),
                dets("adjudicated", vec![det(40., DefectCategory::Crack)]),
            ],
            "inspect facade",
        )
        .unwrap()
    }

    #[test]
    fn request_building() {
        let r = build_request(image(), vec![dets("a", vec![])], "ctx").unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert!(r.context.contains("degraded_plaster"));
        let body = three().wire_body();
        assert_eq!(body["candidates"].as_array().unwrap().len(), 3);
        assert_eq!(body["candidates"][0]["detections"][0]["w"], 10.0);
        assert_eq!(body["mode"], "detection");

        let mixed = build_request(
            image(),
            vec![dets("a", vec![]), CandidateSet::new("b", CandidatePayload::Masks(vec![]))],
            "ctx",
        );
        assert_eq!(mixed, Err(Error::MixedPayload));
        assert_eq!(build_request(image(), vec![], "ctx"), Err(Error::Empty("candidate list")));
        assert!(matches!(
            build_request(image(), vec![dets("a", vec![]), dets("a", vec![])], "ctx"),
            Err(Error::DuplicateLabel(_))
        ));
        assert!(build_request(image(), vec![dets("a", vec![])], "  ").is_err());
    }

    #[test]
    fn verdict_parsing() {
        let r = three();
        let v = parse_verdict(r#"Sure. {"chosen": "intersection", "rationale": "agreed"} done"#, &r).unwrap();
        assert_eq!(v.chosen, "intersection");
        assert_eq!(v.source, VerdictSource::Endpoint);
        assert!(matches!(parse_verdict(r#"{"chosen":"magic"}"#, &r), Err(Error::UnknownLabel(_))));
        assert!(matches!(parse_verdict("", &r), Err(Error::Parse(_))));
        assert!(matches!(parse_verdict("{not json", &r), Err(Error::Parse(_))));
        // Nested record: the outer object is not a verdict, the inner one is.
        let nested = parse_verdict(r#"{"answer": {"chosen": "union"}}"#, &r).unwrap();
        assert_eq!(nested.chosen, "union");
    }

    #[test]
    fn bypass_fallback_and_happy_path() {
        let single = build_request(image(), vec![dets("only", vec![])], "ctx").unwrap();
        let mut calls = 0;
        let mut ep = |_: &str| {
            calls += 1;
            Ok::<_, EndpointFailure>(String::from("{}"))
        };
        let v = adjudicate(&single, Some(&mut ep), "only").unwrap();
        assert_eq!(v.source, VerdictSource::Bypass);
        assert_eq!(calls, 0);

        let r = three();
        let mut calls = 0;
        let mut garbage = |_: &str| {
            calls += 1;
            Ok::<_, EndpointFailure>(String::from("no idea"))
        };
        let v = adjudicate(&r, Some(&mut garbage), "intersection").unwrap();
        assert_eq!((v.chosen.as_str(), v.source), ("intersection", VerdictSource::Fallback));
        assert_eq!(calls, 2);

        let mut flaky_calls = 0;
        let mut flaky = |_: &str| {
            flaky_calls += 1;
            if flaky_calls == 1 {
                Err(EndpointFailure("connection reset".into()))
            } else {
                Ok(String::from(r#"{"chosen":"union","rationale":"r"}"#))
            }
        };
        let v = adjudicate(&r, Some(&mut flaky), "intersection").unwrap();
        assert_eq!((v.chosen.as_str(), v.source), ("union", VerdictSource::Endpoint));

        let v = adjudicate(&r, None, "intersection").unwrap();
        assert_eq!(v.source, VerdictSource::Fallback);
        assert!(adjudicate(&r, None, "missing").is_err());
    }

    #[test]
    fn mock_examples() {
        let twins = build_request(
            image(),
            vec![dets("b", vec![det(0., DefectCategory::Crack)]), dets("a", vec![det(0., DefectCategory::Crack)])],
            "ctx",
        )
        .unwrap();
        assert_eq!(mock_adjudicate(&twins).chosen, "a");

        // A and B agree with each other (1.0 against one peer, 0 against C): 0.5 each; C scores 0.
        let abc = build_request(
            image(),
            vec![
                dets("C", vec![det(40., DefectCategory::Crack)]),
                dets("B", vec![det(0., DefectCategory::Crack)]),
                dets("A", vec![det(0., DefectCategory::Crack)]),
            ],
            "ctx",
        )
        .unwrap();
        let v = mock_adjudicate(&abc);
        assert_eq!(v.chosen, "A");
        assert_eq!(v.source, VerdictSource::Mock);

        let one = build_request(image(), vec![dets("solo", vec![])], "ctx").unwrap();
        assert_eq!(mock_adjudicate(&one).chosen, "solo");
    }

    #[test]
    fn mock_on_masks() {
        let m = |x0: u32| BinaryMask::from_fn(8, 8, move |x, y| (x0..x0 + 3).contains(&x) && y < 3);
        let r = build_request(
            image(),
            vec![
                CandidateSet::new("bbox-prompt", CandidatePayload::Masks(vec![m(0)])),
                CandidateSet::new("points-prompt", CandidatePayload::Masks(vec![m(1)])),
                CandidateSet::new("text-prompt", CandidatePayload::Masks(vec![m(3)])),
            ],
            "ctx",
        )
        .unwrap();
        // points-prompt overlaps both neighbours: (0.5 + 0.2) / 2 beats 0.25 and 0.1.
        assert_eq!(mock_adjudicate(&r).chosen, "points-prompt");
    }
}
