mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::thread;

use common::{BusClient, Harness};

#[test]
fn replies_ok_or_a_typed_error() {
    let h = Harness::start();
    let mut bus = h.bus();
    assert_eq!(bus.publish("node_status", "{\"ok\": true}"), "OK\n");
    assert_eq!(bus.publish("unrouted", "anything"), "OK\n");
    assert_eq!(bus.send_line("PUB node_status"), "OK\n");
    assert_eq!(bus.send_line("SUB node_status"), "ERR bad-line\n");
    assert_eq!(bus.send_line("PUB "), "ERR bad-line\n");
    assert_eq!(bus.send_line(""), "ERR bad-line\n");
    assert_eq!(bus.publish(&"t".repeat(65), "x"), "ERR bad-topic\n");
    assert_eq!(bus.send_line("PUB node_status\tx"), "ERR bad-topic\n");
    assert_eq!(bus.publish("node_status", "still here"), "OK\n");
}

#[test]
fn oversized_line_is_rejected_without_dropping_the_connection() {
    let h = Harness::start();
    let mut bus = h.bus();
    let huge = format!("PUB node_status {}", "x".repeat(200_000));
    assert_eq!(bus.send_line(&huge), "ERR line-too-long\n");
    assert_eq!(bus.publish("node_status", "after"), "OK\n");
}

#[test]
fn invalid_utf8_is_a_bad_line() {
    let h = Harness::start();
    let mut raw = TcpStream::connect(h.service.addresses().bus).unwrap();
    raw.set_read_timeout(Some(common::TIMEOUT)).unwrap();
    raw.write_all(b"PUB node_status \xff\xfe\n").unwrap();
    let mut reply = String::new();
    BufReader::new(&raw).read_line(&mut reply).unwrap();
    assert_eq!(reply, "ERR bad-line\n");
}

#[test]
fn node_status_reaches_the_callback_in_order() {
    let h = Harness::start();
    h.script("seen = []\nrobot.onNodeStatusUpdate = lambda source, stamp, payload: seen.append((source, stamp, payload))");
    let mut bus = h.bus();
    for i in 0..100 {
        assert_eq!(bus.publish("node_status", &format!("{{\"n\": {i}}}")), "OK\n");
    }
    assert_eq!(h.value("[p for _, _, p in seen] == ['{\"n\": %d}' % i for i in range(100)]"), "True");
    assert_eq!(h.value("len({s for s, _, _ in seen})"), "1");
    assert_eq!(h.value("seen[0][0].startswith('127.0.0.1:')"), "True");
    assert_eq!(h.value("all(b[1] >= a[1] for a, b in zip(seen, seen[1:]))"), "True");
}

#[test]
fn concurrent_publishers_each_keep_their_order() {
    let h = Harness::start();
    h.script("seen = []\nrobot.onNodeStatusUpdate = lambda source, stamp, payload: seen.append(payload)");
    let addr = h.service.addresses().bus;
    let workers: Vec<_> = (0..10)
        .map(|w| {
            thread::spawn(move || {
                let mut bus = BusClient::connect(addr);
                for i in 0..10 {
                    assert_eq!(bus.publish("node_status", &format!("{w}:{i}")), "OK\n");
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    assert_eq!(h.value("len(seen)"), "100");
    h.script(
        "by = {}\nfor p in seen:\n    w, i = p.split(':')\n    by.setdefault(w, []).append(int(i))\nordered = all(v == list(range(10)) for v in by.values()) and len(by) == 10",
    );
    assert_eq!(h.value("ordered"), "True");
}

#[test]
fn throwing_callback_disconnects_nobody() {
    let h = Harness::start();
    h.script("def bad(source, stamp, payload):\n    raise KeyError(payload)\nrobot.onNodeStatusUpdate = bad");
    let mut a = h.bus();
    let mut b = h.bus();
    for i in 0..20 {
        assert_eq!(a.publish("node_status", &format!("a{i}")), "OK\n");
        assert_eq!(b.publish("node_status", &format!("b{i}")), "OK\n");
    }
    assert!(h.log_text().contains("KeyError"));
    let mut shell = h.shell();
    assert_eq!(shell.line("1+1"), "2\r\n>>> ");
}

#[test]
fn messages_without_a_handler_are_accepted() {
    let h = Harness::start();
    let mut bus = h.bus();
    for _ in 0..5 {
        assert_eq!(bus.publish("node_status", "{}"), "OK\n");
    }
    assert_eq!(bus.publish("tilt_scan", "{\"tilt_angle\": 1}"), "OK\n");
}

#[test]
fn external_tilt_scan_does_not_reach_the_scan_callback() {
    let h = Harness::start();
    h.script("scans = []\nrobot.onTiltScanData = scans.append");
    let mut bus = h.bus();
    assert_eq!(bus.publish("tilt_scan", "{\"tilt_angle\": 0.3}"), "OK\n");
    assert_eq!(h.value("scans"), "[]");
}
