//! Chat model that replays a fixed script of replies; for protocol tests.

use std::collections::VecDeque;

use parking_lot::Mutex;

use super::{BackendError, CallContext, ChatModel, ChatReply, ChatRequest};

#[derive(Debug)]
pub struct ScriptedChat {
    id: String,
    max_crops: usize,
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(id: impl Into<String>, max_crops: usize, script: Vec<Result<String, BackendError>>) -> Self {
        Self {
            id: id.into(),
            max_crops: max_crops.max(1),
            script: Mutex::new(script.into()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().clone()
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().len()
    }
}

impl ChatModel for ScriptedChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_crops_per_call(&self) -> usize {
        self.max_crops
    }

    fn complete(&self, request: &ChatRequest, _: &CallContext) -> Result<ChatReply, BackendError> {
        self.requests.lock().push(request.clone());
        match self.script.lock().pop_front() {
            Some(Ok(text)) => Ok(ChatReply { text, attempts: 1, latency_s: 0.0 }),
            Some(Err(e)) => Err(e),
            None => Err(BackendError::CallFailed {
                backend_id: self.id.clone(),
                attempts: 1,
                reason: "script exhausted".into(),
            }),
        }
    }
}
