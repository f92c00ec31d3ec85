//! Container payloads are line-oriented scripts:
//!
//! ```text
//! # comment
//! echo <text>              append a line to the container log
//! write <path> <text>      replace a file in the rootfs
//! append <path> <text>
//! cat <path>               copy a file into the log
//! rm <path>
//! send <ip> <port> <text>  open a TCP connection and send
//! ```

use std::net::Ipv4Addr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptOp {
    Echo(String),
    Write {
        path: String,
        data: String,
    },
    Append {
        path: String,
        data: String,
    },
    Cat(String),
    Rm(String),
    Send {
        ip: Ipv4Addr,
        port: u16,
        data: String,
    },
    Invalid(String),
}

impl ScriptOp {
    pub fn name(&self) -> &'static str {
        match self {
            ScriptOp::Echo(_) => "echo",
            ScriptOp::Write { .. } => "write",
            ScriptOp::Append { .. } => "append",
            ScriptOp::Cat(_) => "cat",
            ScriptOp::Rm(_) => "rm",
            ScriptOp::Send { .. } => "send",
            ScriptOp::Invalid(_) => "invalid",
        }
    }
}

fn parse_line(line: &str) -> ScriptOp {
    let invalid = || ScriptOp::Invalid(line.to_string());
    let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
    let path_and = |rest: &str| {
        let (p, d) = rest.split_once(' ').unwrap_or((rest, ""));
        p.starts_with('/').then(|| (p.to_string(), d.to_string()))
    };
    match verb {
        "echo" => ScriptOp::Echo(rest.to_string()),
        "write" => {
            path_and(rest).map_or_else(invalid, |(path, data)| ScriptOp::Write { path, data })
        }
        "append" => {
            path_and(rest).map_or_else(invalid, |(path, data)| ScriptOp::Append { path, data })
        }
        "cat" if rest.starts_with('/') => ScriptOp::Cat(rest.to_string()),
        "rm" if rest.starts_with('/') => ScriptOp::Rm(rest.to_string()),
        "send" => {
            let mut parts = rest.splitn(3, ' ');
            let ip = parts.next().and_then(|s| s.parse().ok());
            let port = parts.next().and_then(|s| s.parse().ok());
            match (ip, port) {
                (Some(ip), Some(port)) => ScriptOp::Send {
                    ip,
                    port,
                    data: parts.next().unwrap_or("").to_string(),
                },
                _ => invalid(),
            }
        }
        _ => invalid(),
    }
}

pub fn parse_script(text: &str) -> Vec<ScriptOp> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| parse_line(l.trim_start()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_op() {
        let ops = parse_script(
            "# demo\necho hello world\nwrite /out a b\nappend /out c\ncat /out\nrm /out\nsend 10.0.0.1 80 hi\nbogus\n",
        );
        assert_eq!(
            ops,
            vec![
                ScriptOp::Echo("hello world".into()),
                ScriptOp::Write {
                    path: "/out".into(),
                    data: "a b".into()
                },
                ScriptOp::Append {
                    path: "/out".into(),
                    data: "c".into()
                },
                ScriptOp::Cat("/out".into()),
                ScriptOp::Rm("/out".into()),
                ScriptOp::Send {
                    ip: Ipv4Addr::new(10, 0, 0, 1),
                    port: 80,
                    data: "hi".into()
                },
                ScriptOp::Invalid("bogus".into()),
            ]
        );
    }
}
