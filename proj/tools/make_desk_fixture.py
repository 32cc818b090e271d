#!/usr/bin/env python3
"""Regenerates the scripted desk-scale fixture under data/desk/.

Twenty phrasings over four files: distinct records whose trajectories a
tiny model can memorize. Every backend is keyed on exact turn text, so role-play, student outputs and
reasons are deterministic and independent of call order.
"""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "desk"
N = 20
DONE = "<<<DONE>>>"


FILES = ["alpha.txt", "beta.txt", "gamma.txt", "delta.txt"]
COUNTS = [12, 7, 31, 5]
PHRASINGS = [
    "How many lines are in {f}?",
    "Count the lines of {f}.",
    "Tell me the line count of {f}.",
    "What is the number of lines in {f}?",
    "How long is {f} in lines?",
]


def file_of(i):
    return FILES[i % len(FILES)]


def count(i):
    return COUNTS[i % len(FILES)]


def question(i):
    return PHRASINGS[i // len(FILES)].format(f=file_of(i))


def bash_turn(i):
    return f"Think: I should count the lines.\nAct: bash\n```bash\nwc -l {file_of(i)}\n```"


def os_output(i):
    return f"The output of the OS:\n{count(i)} {file_of(i)}"


def answer_turn(i):
    return f"Think: The file has {count(i)} lines.\nAct: answer({count(i)})"


def student_turn(i):
    return f"I cannot open {file_of(i)}, but text files like this usually have a few dozen lines."


def reason(i):
    return (f"The AS-IS answer guesses instead of inspecting {file_of(i)}. "
            "The prompt requires a Think line followed by an Act line. "
            "The agent must run wc -l in a bash block before answering. "
            "It must then commit the number with Act: answer(...).")


def dump(name, obj):
    (OUT / name).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    dump("prompt.json", {
        "name": "os_desk",
        "prompt": [
            {"role": "system", "text": "You are an assistant that operates a Linux shell. Each reply has a Think line "
                                       "and an Act line. Use Act: bash with a bash block to run a command, and "
                                       "Act: answer(...) to give the final answer."},
            {"role": "user", "text": "How many lines are in todo.txt?"},
            {"role": "assistant", "text": "Think: I should count the lines.\nAct: bash\n```bash\nwc -l todo.txt\n```"},
            {"role": "user", "text": "The output of the OS:\n4 todo.txt"},
            {"role": "assistant", "text": "Think: The file has 4 lines.\nAct: answer(4)"},
        ],
    })
    dump("generator.json", {
        "responses": [question(i) for i in range(N)],
        "rules": [{"contains": [question(i), "AS-IS"], "response": reason(i)} for i in range(N)],
    })
    agent_rules = []
    for i in range(N):
        agent_rules += [
            {"last": question(i), "response": bash_turn(i)},
            {"last": os_output(i), "response": answer_turn(i)},
            {"last": bash_turn(i), "response": os_output(i)},
            {"last": answer_turn(i), "response": DONE},
        ]
    dump("agent.json", {"rules": agent_rules})
    dump("student.json", {"rules": [{"last": question(i), "response": student_turn(i)} for i in range(N)]})
    dump("eval_suite.json", {
        "task": {"task_id": "os", "max_turns": 4, "max_new_tokens": 64},
        "episodes": [{
            "episode_id": f"q{i:02d}_{file_of(i).split('.')[0]}",
            "initial_observation": question(i),
            "transitions": [{"action": "bash", "argument": f"wc -l {file_of(i)}", "observation": os_output(i)}],
            "default_observation": "The output of the OS:\nbash: command not found",
            "terminal": {"kind": "answer", "expected": str(count(i))},
        } for i in range(N)],
    })


if __name__ == "__main__":
    main()
