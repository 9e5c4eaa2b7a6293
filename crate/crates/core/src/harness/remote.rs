//! Newline-delimited JSON episode worker and its client.
//!
//! Requests: `reset` (template, seed, perturb), `step` (canonical DSL text),
//! `skip` (spend a step without acting) and `close`.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};

use crate::dsl::{parse_action, Action};
use crate::rollout::{EpisodeEnv, RolloutError};
use crate::sim::{build_task, perturb_layout, Env, JudgeState, Observation, StepResult, TaskTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Reset {
        task: TaskTemplate,
        seed: u64,
        #[serde(default)]
        perturb: bool,
    },
    Step {
        action: String,
    },
    Skip,
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    #[serde(default)]
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeState>,
    #[serde(default)]
    pub missed_click: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn error(msg: impl Into<String>) -> Self {
        Self { ok: false, observation: None, done: false, judge: None, missed_click: false, error: Some(msg.into()) }
    }

    fn observed(observation: Observation, judge: JudgeState) -> Self {
        Self {
            ok: true,
            observation: Some(observation),
            done: false,
            judge: Some(judge),
            missed_click: false,
            error: None,
        }
    }

    fn stepped(r: StepResult) -> Self {
        Self {
            ok: true,
            observation: Some(r.observation),
            done: r.done,
            judge: Some(r.judge),
            missed_click: r.missed_click,
            error: None,
        }
    }
}

fn handle(env: &mut Option<Env>, req: Request) -> Response {
    match req {
        Request::Reset { task, seed, perturb } => match build_task(&task) {
            Ok((world, spec)) => {
                let world = if perturb { perturb_layout(&world, seed) } else { world };
                match Env::new(world, spec) {
                    Ok(mut e) => {
                        let obs = e.reset();
                        let judge = e.judge().clone();
                        *env = Some(e);
                        Response::observed(obs, judge)
                    }
                    Err(err) => Response::error(err.to_string()),
                }
            }
            Err(err) => Response::error(err.to_string()),
        },
        Request::Step { action } => {
            let Some(e) = env.as_mut() else { return Response::error("no episode; send reset first") };
            match parse_action(&action) {
                Ok(a) => e.step(&a).map(Response::stepped).unwrap_or_else(|err| Response::error(err.to_string())),
                Err(err) => Response::error(err.to_string()),
            }
        }
        Request::Skip => {
            let Some(e) = env.as_mut() else { return Response::error("no episode; send reset first") };
            e.step_wasted().map(Response::stepped).unwrap_or_else(|err| Response::error(err.to_string()))
        }
        Request::Close => {
            Response { ok: true, observation: None, done: true, judge: None, missed_click: false, error: None }
        }
    }
}

/// Serves one connection until `close` or end of input.
pub fn serve_connection<R: BufRead, W: Write>(input: R, mut output: W) -> std::io::Result<()> {
    let mut env = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, closing) = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                let closing = req == Request::Close;
                (handle(&mut env, req), closing)
            }
            Err(err) => (Response::error(format!("bad request: {err}")), false),
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if closing {
            break;
        }
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve_connection(reader, stream);
        });
    }
    Ok(())
}

/// Client side of the worker protocol.
pub struct RemoteEnv {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    template: TaskTemplate,
    seed: u64,
    perturb: bool,
}

fn transport(e: impl std::fmt::Display) -> RolloutError {
    RolloutError::Transport(e.to_string())
}

impl RemoteEnv {
    pub fn connect(
        addr: impl ToSocketAddrs,
        template: &TaskTemplate,
        seed: u64,
        perturb: bool,
    ) -> Result<Self, RolloutError> {
        let writer = TcpStream::connect(addr).map_err(transport)?;
        let reader = BufReader::new(writer.try_clone().map_err(transport)?);
        Ok(Self { reader, writer, template: template.clone(), seed, perturb })
    }

    fn call(&mut self, req: &Request) -> Result<Response, RolloutError> {
        let mut line = serde_json::to_string(req).map_err(transport)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf).map_err(transport)? == 0 {
            return Err(RolloutError::Transport("connection closed by worker".into()));
        }
        let resp: Response = serde_json::from_str(&buf).map_err(transport)?;
        if !resp.ok {
            return Err(RolloutError::Transport(resp.error.unwrap_or_else(|| "worker error".into())));
        }
        Ok(resp)
    }

    fn step_result(resp: Response) -> Result<StepResult, RolloutError> {
        match (resp.observation, resp.judge) {
            (Some(observation), Some(judge)) => {
                Ok(StepResult { observation, done: resp.done, judge, missed_click: resp.missed_click })
            }
            _ => Err(RolloutError::Transport("response lacks observation or judge".into())),
        }
    }

    pub fn close(&mut self) {
        let _ = self.call(&Request::Close);
    }
}

impl EpisodeEnv for RemoteEnv {
    fn reset(&mut self) -> Result<Observation, RolloutError> {
        let req = Request::Reset { task: self.template.clone(), seed: self.seed, perturb: self.perturb };
        Ok(Self::step_result(self.call(&req)?)?.observation)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, RolloutError> {
        Self::step_result(self.call(&Request::Step { action: action.render() })?)
    }

    fn step_wasted(&mut self) -> Result<StepResult, RolloutError> {
        Self::step_result(self.call(&Request::Skip)?)
    }
}
