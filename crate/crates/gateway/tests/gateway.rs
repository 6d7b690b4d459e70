use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use convowaste_core::classifier::{Classifier, PerfectClassifier};
use convowaste_core::domain::WasteClass;
use convowaste_core::sim::{parse_trace, replay, Scenario, ScenarioItem, SimOptions, Simulation};
use convowaste_core::Config;
use convowaste_gateway::{Gateway, ReplaySession, ServeOptions, Session};

const WAIT: Duration = Duration::from_secs(20);

fn live(scenario: &Scenario, speed: f64) -> Gateway {
    let config = Config::default();
    let options = SimOptions { seed: 1, record_events: true, record_link: false, keep_alive: true };
    // a perfect classifier keeps bin contents predictable
    let classifier: Box<dyn Classifier + Send> = Box::new(PerfectClassifier::default());
    let sim = Simulation::new(&config, scenario, classifier, options).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    Gateway::start(listener, Session::Live(Box::new(sim)), ServeOptions { speed, ..ServeOptions::default() }).unwrap()
}

fn glass(times: impl IntoIterator<Item = f64>) -> Scenario {
    let mut s = Scenario::default();
    s.items = times.into_iter().map(|t| ScenarioItem { t, class: WasteClass::Glass, image_ref: None }).collect();
    s
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(gw: &Gateway) -> Client {
        let stream = TcpStream::connect(gw.addr()).unwrap();
        stream.set_read_timeout(Some(WAIT)).unwrap();
        let mut c = Client { reader: BufReader::new(stream.try_clone().unwrap()), writer: stream };
        // the server waits briefly for an HTTP upgrade before greeting line clients
        assert_eq!(c.next()["type"], "hello");
        c
    }

    fn send(&mut self, msg: &str) {
        self.writer.write_all(msg.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).unwrap();
        assert!(n > 0, "gateway closed the connection");
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["v"], 1, "{line}");
        v
    }

    /// Next message that is not a pushed event or snapshot.
    fn reply(&mut self) -> Value {
        loop {
            let v = self.next();
            if !matches!(v["type"].as_str(), Some("event" | "snapshot" | "finished")) {
                return v;
            }
        }
    }

    fn request(&mut self, msg: Value) -> Value {
        self.send(&msg.to_string());
        self.reply()
    }

    fn status(&mut self) -> Value {
        let r = self.request(json!({"v": 1, "cmd": "status"}));
        assert_eq!(r["type"], "status", "{r}");
        r["snapshot"].clone()
    }

    fn status_until(&mut self, what: &str, pred: impl Fn(&Value) -> bool) -> Value {
        let start = Instant::now();
        loop {
            let s = self.status();
            if pred(&s) {
                return s;
            }
            assert!(start.elapsed() < WAIT, "timed out waiting for {what}: {s}");
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

fn bin(snapshot: &Value, b: usize) -> &Value {
    &snapshot["bins"][b - 1]
}

#[test]
fn dump_empties_bin_and_rearms_notification() {
    let times = (0..9).map(|i| f64::from(i) * 20.0).chain((0..9).map(|i| 600.0 + f64::from(i) * 20.0));
    let gw = live(&glass(times), 1000.0);
    let mut c = Client::connect(&gw);

    let s = c.status_until("nine glass items", |s| bin(s, 3)["count"] == 9 && s["notifications"]["sent"] == 1);
    assert_eq!(bin(&s, 3)["level_percent"], 90.0);

    let ack = c.request(json!({"v": 1, "id": "d1", "cmd": "dump", "bin": 3}));
    assert_eq!((ack["type"].as_str(), ack["id"].as_str(), ack["cmd"].as_str()), (Some("ack"), Some("d1"), Some("dump")));
    let seq = ack["seq"].as_u64().unwrap();
    let s = c.status();
    assert!(s["last_seq"].as_u64().unwrap() >= seq);
    assert_eq!((bin(&s, 3)["count"].as_u64(), bin(&s, 3)["level_percent"].as_f64()), (Some(0), Some(0.0)));

    let s = c.status_until("refill", |s| bin(s, 3)["count"] == 9 && s["notifications"]["sent"] == 2);
    assert!(s["notifications"]["last_sms"].as_str().unwrap().starts_with("CONVOWASTE M1 BIN 3 FULL 80% AT"));
    gw.shutdown();
}

#[test]
fn unknown_bin_and_bad_commands() {
    let gw = live(&Scenario::single(WasteClass::Plastic), 10.0);
    let mut c = Client::connect(&gw);
    let r = c.request(json!({"v": 1, "id": 4, "cmd": "dump", "bin": 7}));
    assert_eq!((r["type"].as_str(), r["code"].as_str(), r["id"].as_u64()), (Some("error"), Some("unknown-bin"), Some(4)));
    c.send("this is not json");
    assert_eq!(c.reply()["code"], "bad-command");
    let r = c.request(json!({"v": 2, "cmd": "status"}));
    assert_eq!(r["code"], "bad-command");
    // the connection survives errors
    assert_eq!(c.status()["bins"].as_array().unwrap().len(), 6);
    gw.shutdown();
}

#[test]
fn replies_keep_per_client_order() {
    let gw = live(&Scenario::single(WasteClass::Metal), 10.0);
    let mut c = Client::connect(&gw);
    let batch = [
        json!({"v": 1, "id": 1, "cmd": "pause"}),
        json!({"v": 1, "id": 2, "cmd": "status"}),
        json!({"v": 1, "id": 3, "cmd": "dump", "bin": 9}),
        json!({"v": 1, "id": 4, "cmd": "resume"}),
        json!({"v": 1, "id": 5, "cmd": "dump", "bin": 1}),
    ];
    let text: String = batch.iter().map(|m| format!("{m}\n")).collect();
    c.writer.write_all(text.as_bytes()).unwrap();
    let replies: Vec<Value> = (0..5).map(|_| c.reply()).collect();
    let ids: Vec<u64> = replies.iter().map(|r| r["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 2, 3, 4, 5]);
    let types: Vec<&str> = replies.iter().map(|r| r["type"].as_str().unwrap()).collect();
    assert_eq!(types, ["ack", "status", "error", "ack", "ack"]);
    assert_eq!(replies[1]["snapshot"]["operator_paused"], true);
    let seqs: Vec<u64> = [0, 3, 4].iter().map(|&i| replies[i]["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    gw.shutdown();
}

#[test]
fn status_counts_match_streamed_events() {
    let gw = live(&Scenario::uniform(2, 5.0), 500.0);
    let mut c = Client::connect(&gw);
    let sub = c.request(json!({"v": 1, "cmd": "subscribe"}));
    assert_eq!(sub["type"], "ack");
    // the first push is the state at subscription; events after it are streamed
    let first = c.next();
    assert_eq!(first["type"], "snapshot");
    assert_eq!(first["snapshot"]["last_seq"], sub["seq"]);
    let mut binned = [0u64; 6];
    for b in 1..=6 {
        binned[b - 1] = bin(&first["snapshot"], b)["count"].as_u64().unwrap();
    }
    let mut last_seen = sub["seq"].as_u64();
    let mut checked = 0;
    let start = Instant::now();
    while checked < 3 {
        assert!(start.elapsed() < WAIT);
        let m = c.next();
        match m["type"].as_str().unwrap() {
            "event" => {
                let e = &m["event"];
                if e["kind"] == "ItemBinned" {
                    binned[e["bin"].as_u64().unwrap() as usize - 1] += 1;
                }
                last_seen = e["seq"].as_u64();
            }
            "snapshot" => {
                let s = &m["snapshot"];
                // pushed snapshots are taken after the events before them were sent
                if s["last_seq"].as_u64() == last_seen && binned.iter().sum::<u64>() > 0 {
                    for b in 1..=6 {
                        assert_eq!(bin(s, b)["count"].as_u64().unwrap(), binned[b - 1], "bin {b} in {s}");
                    }
                    checked += 1;
                }
            }
            _ => {}
        }
    }
    gw.shutdown();
}

#[test]
fn replay_session_streams_trace_and_refuses_commands() {
    let config = Config::default();
    let scenario = Scenario::uniform(1, 10.0);
    let opts = SimOptions { seed: 3, record_events: true, record_link: false, keep_alive: false };
    let mut sim = Simulation::new(&config, &scenario, config.build_classifier(3).unwrap(), opts).unwrap();
    sim.run().unwrap();
    let text = sim.trace_text();
    let expected = serde_json::to_value(replay(&text).unwrap()).unwrap();

    let session = Session::Replay(ReplaySession::new(parse_trace(&text).unwrap(), &config));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let gw = Gateway::start(listener, session, ServeOptions { speed: 100.0, ..ServeOptions::default() }).unwrap();
    let mut c = Client::connect(&gw);
    let r = c.request(json!({"v": 1, "cmd": "pause"}));
    assert_eq!(r["code"], "not-running");
    c.request(json!({"v": 1, "cmd": "subscribe"}));
    let mut events = 0;
    let metrics = loop {
        let m = c.next();
        match m["type"].as_str().unwrap() {
            "event" => events += 1,
            "finished" => break m["metrics"].clone(),
            _ => {}
        }
    };
    assert_eq!(metrics, expected);
    assert!(events > 0 && events <= sim.events().len());
    let s = c.status();
    assert_eq!(s["finished"], true);
    assert_eq!(s["last_seq"].as_u64(), sim.events().last().map(|e| e.seq));
    gw.shutdown();
}

#[test]
fn websocket_clients_share_the_port() {
    let gw = live(&Scenario::single(WasteClass::Organic), 50.0);
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/", gw.addr())).unwrap();
    let text = |m: tungstenite::Message| -> Value { serde_json::from_str(m.to_text().unwrap()).unwrap() };
    assert_eq!(text(ws.read().unwrap())["type"], "hello");

    ws.send(tungstenite::Message::text(json!({"v": 1, "id": 1, "cmd": "dump", "bin": 7}).to_string())).unwrap();
    let r = text(ws.read().unwrap());
    assert_eq!((r["type"].as_str(), r["code"].as_str()), (Some("error"), Some("unknown-bin")));

    ws.send(tungstenite::Message::text(json!({"v": 1, "cmd": "subscribe"}).to_string())).unwrap();
    let start = Instant::now();
    let binned = loop {
        assert!(start.elapsed() < WAIT);
        let m = text(ws.read().unwrap());
        if m["type"] == "event" && m["event"]["kind"] == "ItemBinned" {
            break m["event"].clone();
        }
    };
    assert_eq!((binned["class"].as_str(), binned["bin"].as_u64()), (Some("organic"), Some(4)));
    ws.close(None).unwrap();
    gw.shutdown();
}
