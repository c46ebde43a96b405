//! Random protocol messages and frames that are invalid by construction.

use audiofab::wire::{encode_frame, Method, RpcError, RpcMessage, INVALID_PARAMS, TIMEOUT, TOOL_FAILURE};
use rand::rngs::StdRng;
use rand::Rng;
use serde_json::{Map, Value};

const ALPHABET: &[char] = &[
    'a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '\u{0}', 'é', '音', '🎵', '/', '{', '}',
];

pub fn string(rng: &mut StdRng) -> String {
    let n = rng.random_range(0..12);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

pub fn value(rng: &mut StdRng, depth: u32) -> Value {
    let top = if depth == 0 { 5 } else { 7 };
    match rng.random_range(0..top) {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => Value::from(rng.random::<i64>()),
        3 => Value::from(rng.random_range(-1e12..1e12f64)),
        4 => Value::String(string(rng)),
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| value(rng, depth - 1)).collect()),
        _ => Value::Object(object(rng, depth - 1)),
    }
}

pub fn object(rng: &mut StdRng, depth: u32) -> Map<String, Value> {
    (0..rng.random_range(0..4))
        .map(|_| (string(rng), value(rng, depth)))
        .collect()
}

fn method(rng: &mut StdRng) -> Method {
    Method::ALL[rng.random_range(0..Method::ALL.len())]
}

fn id(rng: &mut StdRng) -> u64 {
    rng.random_range(1..=u64::MAX)
}

pub fn message(rng: &mut StdRng) -> RpcMessage {
    let params = |rng: &mut StdRng| rng.random_bool(0.7).then(|| object(rng, 2));
    match rng.random_range(0..4) {
        0 => {
            let m = method(rng);
            RpcMessage::request(id(rng), m, params(rng))
        }
        1 => {
            let m = method(rng);
            RpcMessage::notification(m, params(rng))
        }
        2 => {
            let i = id(rng);
            RpcMessage::success(i, value(rng, 3))
        }
        _ => {
            let code = [INVALID_PARAMS, TOOL_FAILURE, TIMEOUT][rng.random_range(0..3)];
            let mut err = RpcError::new(code, format!("failure {}", string(rng)));
            if rng.random() {
                err = err.with_data(value(rng, 2));
            }
            let i = id(rng);
            RpcMessage::failure(i, err)
        }
    }
}

/// A frame that no conforming decoder may accept.
pub fn garbage(rng: &mut StdRng) -> Vec<u8> {
    let valid = encode_frame(&message(rng)).unwrap();
    let body = &valid[..valid.len() - 1];
    let mut obj: Map<String, Value> = serde_json::from_slice(body).unwrap();
    let reencode = |o: &Map<String, Value>| serde_json::to_vec(o).unwrap();
    match rng.random_range(0..12) {
        0 => body[..rng.random_range(0..body.len())].to_vec(),
        1 => {
            let mut b = body.to_vec();
            let at = rng.random_range(0..=b.len());
            b.insert(at, 0xFF);
            b
        }
        2 => {
            let mut b = body.to_vec();
            let at = rng.random_range(1..b.len());
            b.insert(at, b'\n');
            b
        }
        3 => {
            let mut b: Vec<u8> = (0..rng.random_range(0..64))
                .map(|_| rng.random_range(b'!'..b'z'))
                .collect();
            b.insert(0, b'#');
            b
        }
        4 => serde_json::to_vec(&Value::Array(vec![value(rng, 1)])).unwrap(),
        5 => {
            obj.remove("kind");
            reencode(&obj)
        }
        6 => {
            obj.insert("kind".into(), Value::String(format!("kind-{}", string(rng))));
            reencode(&obj)
        }
        7 => {
            obj.insert("id".into(), Value::from(0));
            reencode(&obj)
        }
        8 => {
            if obj.contains_key("method") {
                obj.insert("method".into(), Value::String(format!("no/{}", string(rng))));
            } else {
                obj.insert("method".into(), Value::String("initialize".into()));
            }
            reencode(&obj)
        }
        9 => {
            obj.insert(format!("x-{}", string(rng)), value(rng, 1));
            reencode(&obj)
        }
        10 => {
            if obj.get("kind") == Some(&Value::String("notification".into())) {
                obj.insert("id".into(), Value::from(7));
            } else {
                obj.remove("id");
            }
            reencode(&obj)
        }
        _ => {
            obj.insert("error".into(), serde_json::json!({"code": 12345, "message": ""}));
            reencode(&obj)
        }
    }
}
