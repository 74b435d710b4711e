"""Classifier rules, metric aggregation, coincidence matrix, report formats."""

from __future__ import annotations

import json

import pytest

from coqharness.agent import AttemptRecord, RunConfig, Turn
from coqharness.client import DecodingParams
from coqharness.evaluate import (
    CATEGORIES,
    ClassifierRules,
    EvalError,
    TooFewConfigs,
    build_report,
    classify_failure,
    coincidence_matrix,
    emit_report,
    load_attempts_dir,
    render_csv,
    render_markdown,
    report_to_json,
    run_eval,
)

REFUSAL_TEXT = (
    "Without further information on what TX and G are, I cannot generate a "
    "valid proof. Please provide more information or define the related "
    "functions and types."
)


def make_attempt(
    theorem="f.v::t",
    tag="zs",
    accepted=False,
    script="Proof. auto. Qed.",
    message=None,
    kind="proof",
    index=0,
    budget=False,
    lexical=False,
):
    return AttemptRecord(
        theorem_id=theorem,
        config_tag=tag,
        variant_id="base",
        candidate_index=index,
        proof_script=script if kind == "proof" else "",
        accepted=accepted,
        failing_step=(1, "auto.", message) if message else None,
        turns=[Turn("prompt", "completion")],
        completion_kind=kind,
        refusal_text=REFUSAL_TEXT if kind == "refusal" else None,
        budget_exhausted=budget,
        lexical_error=lexical,
    )


# -- classifier ---------------------------------------------------------------


def test_classifier_paper_fixtures():
    assert classify_failure(make_attempt(accepted=True)) == "correct"
    assert classify_failure(make_attempt(kind="refusal")) == "refusal"
    assert (
        classify_failure(make_attempt(message="The reference stutter_bisim was not found."))
        == "hallucinated_reference"
    )
    assert classify_failure(make_attempt(message="R is already used.")) == "proof_state_mismatch"


def test_classifier_remaining_rules():
    assert classify_failure(make_attempt(message="Unknown identifier foo")) == "hallucinated_reference"
    assert classify_failure(make_attempt(message="No such hypothesis: H0")) == "proof_state_mismatch"
    assert (
        classify_failure(make_attempt(message="No product even after head-reduction."))
        == "proof_state_mismatch"
    )
    assert classify_failure(make_attempt(message="There are not enough products"))\
        == "proof_state_mismatch"
    assert classify_failure(make_attempt(message="Syntax error: '.' expected")) == "syntax_error"
    assert classify_failure(make_attempt(message="TIMEOUT")) == "resource"
    assert classify_failure(make_attempt(budget=True)) == "resource"
    assert classify_failure(make_attempt(kind="malformed", lexical=True)) == "syntax_error"
    assert classify_failure(make_attempt(message="No applicable tactic.")) == "wrong_tactic"
    assert classify_failure(make_attempt()) == "wrong_tactic"  # prover saw it, no rule hit
    assert classify_failure(make_attempt(kind="malformed")) == "other"
    assert classify_failure(make_attempt(kind="empty")) == "other"


def test_classifier_rules_from_custom_file(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(
        json.dumps({"rules": [{"category": "resource", "patterns": ["glacial"]}]})
    )
    rules = ClassifierRules.load(path)
    assert classify_failure(make_attempt(message="glacial slowness"), rules) == "resource"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rules": [{"category": "nope", "patterns": ["x"]}]}))
    with pytest.raises(EvalError):
        ClassifierRules.load(bad)


# -- aggregation --------------------------------------------------------------


def two_config_attempts():
    a = [
        make_attempt("f.v::t1", "A", accepted=True, script="Proof. auto. Qed."),
        make_attempt("f.v::t1", "A", accepted=True, script="Proof. auto. Qed.", index=1),
        make_attempt("f.v::t1", "A", accepted=True, script="Proof. tauto. Qed.", index=2),
        make_attempt("f.v::t2", "A", accepted=True, script="Proof. easy. Qed."),
        make_attempt("f.v::t3", "A", message="No applicable tactic."),
        make_attempt("f.v::t4", "A", kind="refusal"),
    ]
    b = [
        make_attempt("f.v::t2", "B", accepted=True, script="Proof. easy. Qed."),
        make_attempt("f.v::t3", "B", accepted=True, script="Proof. auto. Qed."),
        make_attempt("f.v::t4", "B", message="R is already used."),
    ]
    return {"A": a, "B": b}


def test_build_report_counts_and_dedup():
    report = build_report(two_config_attempts())
    metrics = report.per_config["A"]
    assert metrics.n_attempts == 6
    assert metrics.n_accepted_raw == 4
    assert metrics.n_correct_proofs == 3  # t1 has 2 distinct scripts, t2 one
    assert metrics.n_proven_theorems == 2
    assert metrics.taxonomy["correct"] == 4
    assert metrics.taxonomy["wrong_tactic"] == 1
    assert metrics.taxonomy["refusal"] == 1
    assert sum(metrics.taxonomy.values()) == metrics.n_attempts
    assert report.proven["A"] == ["f.v::t1", "f.v::t2"]
    assert report.coincidence[("A", "B")] == 1  # only t2 overlaps
    assert report.coincidence[("A", "B")] == report.coincidence[("B", "A")]
    assert report.coincidence[("A", "A")] == metrics.n_proven_theorems


def test_report_invariant_under_reordering():
    attempts = two_config_attempts()
    reordered = {tag: list(reversed(records)) for tag, records in attempts.items()}
    assert report_to_json(build_report(attempts)) == report_to_json(build_report(reordered))


def test_coincidence_bounds_and_rendering():
    report = build_report(two_config_attempts())
    for (a, b), count in report.coincidence.items():
        assert count <= min(
            report.per_config[a].n_proven_theorems, report.per_config[b].n_proven_theorems
        )
    rendered = coincidence_matrix(report)
    lines = rendered.splitlines()
    assert lines[0].split() == ["A", "B"]
    assert lines[1].split() == ["A", "-", "-"]
    assert lines[2].split() == ["B", "1", "-"]


def test_coincidence_disjoint_identical_and_shape():
    disjoint = build_report(
        {
            "A": [make_attempt("f.v::t1", "A", accepted=True)],
            "B": [make_attempt("f.v::t2", "B", accepted=True)],
        }
    )
    assert disjoint.coincidence[("A", "B")] == 0

    identical = build_report(
        {
            tag: [
                make_attempt(f"f.v::t{i}", tag, accepted=True, script=f"Proof. s{i}. Qed.")
                for i in range(3)
            ]
            for tag in ("A", "B")
        }
    )
    assert identical.coincidence[("A", "B")] == 3

    six = build_report(
        {
            f"c{k}": [make_attempt("f.v::t", f"c{k}", accepted=True)] for k in range(6)
        }
    )
    rendered = coincidence_matrix(six)
    cells = rendered.splitlines()[1:]
    populated = sum(cell.split()[1:].count("1") for cell in cells)
    dashes = sum(cell.split()[1:].count("-") for cell in cells)
    assert populated == 15  # 6 choose 2
    assert dashes == 21  # diagonal and above

    with pytest.raises(TooFewConfigs):
        coincidence_matrix(build_report({"A": [make_attempt()]}))


# -- end-to-end over the toy corpus ------------------------------------------


def test_run_eval_validation(toy_corpus, toy_deps):
    deps = toy_deps()
    with pytest.raises(EvalError):
        run_eval(toy_corpus, [], deps)
    config = RunConfig(tag="zs", mode="zs", decoding=DecodingParams(n=1))
    with pytest.raises(EvalError):
        run_eval(toy_corpus, [config, config], deps)

    from coqharness.corpus import Corpus

    no_test = Corpus(list(toy_corpus.records), toy_corpus.root,
                     {r.id: "train" for r in toy_corpus.records})
    with pytest.raises(EvalError):
        run_eval(no_test, [config], deps)


def test_run_eval_annotates_missed_simple(toy_deps):
    deps = toy_deps()
    config = RunConfig(tag="zs", mode="zs", decoding=DecodingParams(n=2), seed=11)
    report = run_eval(deps.corpus, [config], deps)
    records = report.attempts["zs"]
    trans = [r for r in records if r.theorem_id == "relations.v::trans_incl"]
    assert trans and all(not r.accepted for r in trans)
    assert all(r.missed_simple for r in trans)  # one-tactic reference proof
    assert report.manifest_hash and report.corpus_hash

    # weak_refl's reference proof is three tactics: failures stay unflagged
    sim = RunConfig(tag="fs-sim", mode="fs-sim", k_shots=2,
                    decoding=DecodingParams(n=2), seed=11)
    sim_report = run_eval(deps.corpus, [sim], toy_deps())
    weak = [r for r in sim_report.attempts["fs-sim"]
            if r.theorem_id == "weak.v::weak_refl"]
    assert weak and all(not r.accepted for r in weak)
    assert all(not r.missed_simple for r in weak)


def test_run_eval_parallel_matches_serial(toy_deps, manifest_path):
    from coqharness.cli import load_manifest

    manifest = load_manifest(str(manifest_path), DecodingParams())
    serial = run_eval(toy_deps().corpus, manifest, toy_deps())
    parallel = run_eval(toy_deps().corpus, manifest, toy_deps(), workers=3)
    assert report_to_json(serial) == report_to_json(parallel)


# -- emission -----------------------------------------------------------------


def test_markdown_row_labels_and_csv_json_agreement(tmp_path):
    report = build_report(two_config_attempts())
    markdown = render_markdown(report)
    assert "| #Correct Proof |" in markdown
    assert "| #Proven Theorems |" in markdown

    files = emit_report(report, tmp_path)
    names = {p.name for p in files}
    assert {"report.md", "report.csv", "report.json"} <= names

    payload = json.loads((tmp_path / "report.json").read_text())
    csv_lines = (tmp_path / "report.csv").read_text().splitlines()
    header = csv_lines[0].split(",")
    for row in csv_lines[1:]:
        if not row or row.startswith("coincidence") or not row.split(",")[0]:
            break
        cells = dict(zip(header, row.split(",")))
        tag = cells["config"]
        assert int(cells["n_correct_proofs"]) == payload["per_config"][tag]["n_correct_proofs"]
        assert int(cells["n_proven_theorems"]) == payload["per_config"][tag]["n_proven_theorems"]
        for category in CATEGORIES:
            assert (
                int(cells[f"taxonomy_{category}"])
                == payload["per_config"][tag]["taxonomy"][category]
            )


def test_refusal_share_five_point_four_percent(tmp_path):
    # 2 refusals among 37 attempts = 5.4%
    attempts = [make_attempt(f"f.v::t{i}", "A", message="No applicable tactic.", index=i)
                for i in range(35)]
    attempts += [make_attempt("f.v::r1", "A", kind="refusal"),
                 make_attempt("f.v::r2", "A", kind="refusal")]
    assert len(attempts) == 37
    report = build_report({"A": attempts})
    assert f"{report.refusal_share:.1f}" == "5.4"
    markdown = render_markdown(report)
    assert "Refusal share: 5.4% of attempts" in markdown


def test_recompute_from_attempts_dir(tmp_path):
    report = build_report(two_config_attempts())
    emit_report(report, tmp_path)
    loaded = load_attempts_dir(tmp_path / "attempts")
    recomputed = build_report(loaded)
    original = report_to_json(report)
    clone = report_to_json(recomputed)
    for field in ("per_config", "proven", "coincidence", "refusal_share_percent"):
        assert clone[field] == original[field]


def test_csv_roundtrip_of_coincidence(tmp_path):
    report = build_report(two_config_attempts())
    csv_text = render_csv(report)
    assert "coincidence_a,coincidence_b,count" in csv_text
    assert "B,A,1" in csv_text
