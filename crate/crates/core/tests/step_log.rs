mod common;

use std::io::Write;
use std::sync::{Arc, Mutex};

use fairflow::seed;
use regex::Regex;

#[derive(Clone, Default)]
struct Buffer(Arc<Mutex<Vec<u8>>>);

impl Write for Buffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn every_step_logs_one_structured_line() {
    let buffer = Buffer::default();
    let sink = buffer.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_writer(move || sink.clone())
        .with_ansi(false)
        .without_time()
        .with_target(false)
        .finish();
    let stack = common::stack();
    let order = tracing::subscriber::with_default(subscriber, || {
        let order = stack.services.submit_order(stack.reits_order(), &seed::reits_user()).unwrap();
        stack.services.importer.drain("w").unwrap();
        order
    });
    let text = String::from_utf8(buffer.0.lock().unwrap().clone()).unwrap();
    let line = Regex::new(r"order=([0-9a-f-]{36}) step=([a-z]+) outcome=(ok|fail) ms=(\d+)").unwrap();
    let steps: Vec<String> = line
        .captures_iter(&text)
        .inspect(|c| assert_eq!(&c[1], order.uuid))
        .map(|c| c[2].to_string())
        .collect();
    assert_eq!(steps, ["package", "preprocess", "import", "redirect", "metadata", "finalize"]);
}
