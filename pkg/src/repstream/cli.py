"""Command-line surface: streaming inference, counting, cost reports, training.

Machine-readable JSON goes to stdout (JSON-lines for streams), diagnostics to
stderr. Exit codes: 0 success, 1 contract violation, 2 I/O error, 3 numeric
failure. File outputs are written atomically (temp file + rename). All
stochastic commands honor the SEED environment variable as the default seed;
an explicit --seed flag wins.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import cost as costmod
from . import counting as cnt
from . import datasets as ds
from . import netspec as ns
from . import pose as posekit
from . import training as tr
from .errors import ConfigurationError, ContractError, ManifestError, NumericError
from .runtime import Network, open_session, run_offline
from .tensor import TensorND, load_tensor

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ContractError(message)


def _default_seed() -> int:
    env = os.environ.get("SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ContractError(f"SEED environment variable is not an integer: {env!r}")
    return 0


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_network(args, dtype=np.float32) -> Network:
    if getattr(args, "checkpoint", None):
        net, _ = tr.load_checkpoint(args.checkpoint)
        return net
    if args.net == "reference":
        spec = ns.build_reference_backbone(input_size=getattr(args, "input_size", None))
    else:
        with open(args.net, "r", encoding="utf-8") as f:
            spec = ns.network_spec_from_json(f.read())
    if getattr(args, "inflation", None):
        if args.inflation == "reference":
            ispec = ns.reference_inflation()
        else:
            with open(args.inflation, "r", encoding="utf-8") as f:
                ispec = ns.inflation_spec_from_json(f.read())
        spec = ns.inflate(spec, ispec)
    return Network.build(spec, seed=getattr(args, "seed", 0), dtype=dtype)


# ------------------------------------------------------------------ commands


def _cmd_stream_count(args) -> int:
    net = _load_network(args)
    session = open_session(net)
    decoder = cnt.SchemeDecoder(args.scheme)
    stream = sys.stdin.buffer if args.frames == "-" else open(args.frames, "rb")
    try:
        for frame in ds.iter_frame_stream(stream):
            arr = frame.astype(np.float32) / 255.0
            out = session.push_frame(arr.transpose(2, 0, 1))
            if out is None:
                continue
            count = decoder.push(int(np.argmax(out.probabilities)))
            print(
                json.dumps(
                    {
                        "frame_index": out.frame_index,
                        "step": out.step_index,
                        "probabilities": out.probabilities.tolist(),
                        "count": count,
                    }
                )
            )
    finally:
        if stream is not sys.stdin.buffer:
            stream.close()
    final = {"count": decoder.result().predicted_count}
    if args.events:
        with open(args.events, "r", encoding="utf-8") as f:
            track = cnt.event_track_from_json(f.read())
        final["true_count"] = track.end_count
        if track.end_count > 0:
            final["mape"] = abs(final["count"] - track.end_count) / track.end_count * 100.0
    print(json.dumps(final))
    return EXIT_OK


def _cmd_infer(args) -> int:
    net = _load_network(args)
    if args.clip:
        clip = load_tensor(args.clip)
        result = run_offline(net, clip)
    else:
        frames = list(ds.iter_frame_stream(sys.stdin.buffer))
        if not frames:
            raise ContractError("empty frame stream")
        arr = np.stack(frames).astype(np.float32) / 255.0
        result = run_offline(net, arr.transpose(3, 0, 1, 2))
    for idx, probs in zip(result.step_frame_indices, result.probabilities):
        print(json.dumps({"frame_index": int(idx), "probabilities": probs.tolist()}))
    return EXIT_OK


def _cmd_cost(args) -> int:
    if args.fps <= 0:
        raise ContractError(f"--fps must be positive, got {args.fps}")
    net = None
    if args.net == "reference":
        spec = ns.build_reference_backbone()
    else:
        with open(args.net, "r", encoding="utf-8") as f:
            spec = ns.network_spec_from_json(f.read())
    if args.inflation:
        ispec = (
            ns.reference_inflation()
            if args.inflation == "reference"
            else ns.inflation_spec_from_json(open(args.inflation).read())
        )
        spec = ns.inflate(spec, ispec)
    report = costmod.per_second_cost(spec, args.fps)
    if args.table:
        print(report.format_table(), file=sys.stderr)
    print(report.to_json())
    return EXIT_OK


def _cmd_train(args) -> int:
    scheme = args.scheme
    if not args.synthetic:
        raise ConfigurationError(
            "only --synthetic training data is bundled; supply --synthetic"
        )
    num_classes = len(cnt.SCHEME_VOCAB[scheme])
    spec = tr.tiny_counting_spec(num_classes)
    net = Network.build(spec, seed=args.seed, dtype=np.float32)
    train_set = tr.make_oscillating_dataset(args.train_clips, seed=args.seed + 1)
    eval_set = tr.make_oscillating_dataset(args.eval_clips, seed=args.seed + 2)
    cfg = tr.TrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        last_k=args.k,
        reset_at_boundary=args.reset_at_boundary,
    )
    result = tr.train_counting_head(net, train_set, eval_set, scheme, cfg)
    digest = tr.save_checkpoint(args.out, result.net, {"scheme": scheme})
    if args.log:
        _atomic_write(args.log, "".join(json.dumps(h) + "\n" for h in result.history))
    print(
        json.dumps(
            {
                "checkpoint": args.out,
                "sha256": digest,
                "steps": args.steps,
                "final_loss": result.history[-1]["loss"] if result.history else None,
                "mape_per_exercise": result.mape_per_exercise,
            }
        )
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    net, extra = tr.load_checkpoint(args.checkpoint)
    scheme = args.scheme if args.scheme else int(extra.get("scheme", 3))
    eval_set = tr.make_oscillating_dataset(args.eval_clips, seed=args.seed)
    result = tr.evaluate_counting(net, eval_set, scheme)
    print(json.dumps({"scheme": scheme, "mape_per_exercise": result}))
    return EXIT_OK


def _cmd_manifest_validate(args) -> int:
    manifest = ds.load_and_validate_manifest(args.manifest)
    print(json.dumps(manifest.summary()))
    return EXIT_OK


def _cmd_fewshot_sample(args) -> int:
    if args.n not in ds.FEWSHOT_SIZES:
        print(
            f"note: {args.n} is not one of the released sizes {ds.FEWSHOT_SIZES}",
            file=sys.stderr,
        )
    manifest = ds.load_and_validate_manifest(args.manifest)
    sampled = ds.sample_fewshot(manifest, args.n, args.seed)
    lines = []
    for e in sampled.entries:
        doc = {
            "video_id": e.video_id,
            "path": e.path,
            "video_class": e.video_class,
            "worker_id": e.worker_id,
            "split": e.split,
            "fps": e.fps,
            "duration": e.duration,
        }
        if e.events_path:
            doc["events_path"] = e.events_path
        lines.append(json.dumps(doc))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(json.dumps(sampled.summary()))
    return EXIT_OK


def _cmd_pose(args) -> int:
    if args.pose_action == "adjacency":
        layout = posekit.build_layout(args.layout)
        parts = posekit.build_adjacency(layout, max_hop=args.max_hop)
        print(
            json.dumps(
                {
                    "layout": layout.name,
                    "num_nodes": layout.num_nodes,
                    "partitions": parts.partition_names,
                    "mask_shape": list(parts.mask_shape),
                    "matrices": parts.matrices.tolist(),
                }
            )
        )
        return EXIT_OK
    seq = posekit.load_pose_jsonl(args.input)
    if args.pose_action == "map":
        out = posekit.map_to_openpose(seq)
    else:  # augment
        params = posekit.CameraMotionParams(
            rotation_deg=(-args.rotation, args.rotation),
            translate_x=(-args.translation, args.translation),
            translate_y=(-args.translation, args.translation),
            scale=(1.0 - args.scale, 1.0 + args.scale),
        )
        out = posekit.camera_motion_augment(seq, params, args.seed)
    posekit.save_pose_jsonl(args.out, out)
    print(json.dumps({"layout": out.layout, "frames": out.num_frames, "joints": out.num_joints}))
    return EXIT_OK


def _cmd_densify(args) -> int:
    with open(args.events, "r", encoding="utf-8") as f:
        text = f.read()
    doc = json.loads(text)
    kind_map = None
    try:
        kind_map = ds.frame_kind_map(doc.get("exercise", ""))
    except ContractError:
        pass
    track = cnt.event_track_from_json(text, kind_map)
    seq = cnt.densify(track, args.scheme, args.steps)
    print(
        json.dumps(
            {
                "scheme": args.scheme,
                "labels": seq.labels.tolist(),
                "names": seq.names(),
                "end_events": track.end_count,
            }
        )
    )
    return EXIT_OK


def _cmd_decode_count(args) -> int:
    if args.labels:
        with open(args.labels, "r", encoding="utf-8") as f:
            doc = json.load(f)
        labels = np.asarray(doc["labels"] if isinstance(doc, dict) else doc)
        result = cnt.decode_count(labels, args.scheme)
    else:
        rows = []
        stream = sys.stdin if args.probs == "-" else open(args.probs, "r")
        try:
            for line in stream:
                line = line.strip()
                if line:
                    rows.append(json.loads(line)["probabilities"])
        finally:
            if stream is not sys.stdin:
                stream.close()
        result = cnt.decode_count(np.asarray(rows), args.scheme)
    print(
        json.dumps(
            {"count": result.predicted_count, "event_steps": result.event_steps}
        )
    )
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> _Parser:
    p = _Parser(prog="repstream", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_net_flags(sp, checkpoint=False):
        sp.add_argument("--net", default="reference",
                        help="network spec JSON path, or 'reference'")
        sp.add_argument("--inflation", default=None,
                        help="inflation spec JSON path, or 'reference'")
        sp.add_argument("--input-size", type=int, default=None, dest="input_size",
                        help="override the square input resolution")
        sp.add_argument("--seed", type=int, default=_default_seed(),
                        help="seed for parameter initialization")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None,
                            help="load network and parameters from a checkpoint")

    sp = sub.add_parser("stream-count", help="stream frames, emit probabilities and a running count")
    add_net_flags(sp, checkpoint=True)
    sp.add_argument("--scheme", type=int, choices=(1, 2, 3), default=3)
    sp.add_argument("--frames", default="-", help="framed binary stream path, '-' for stdin")
    sp.add_argument("--events", default=None, help="optional ground-truth event track JSON")
    sp.set_defaults(func=_cmd_stream_count)

    sp = sub.add_parser("infer", help="offline inference over a stored clip or frame stream")
    add_net_flags(sp, checkpoint=True)
    sp.add_argument("--clip", default=None, help="tensor container path (axes CTHW)")
    sp.set_defaults(func=_cmd_infer)

    sp = sub.add_parser("cost", help="per-layer MAC accounting and per-second totals")
    sp.add_argument("--net", default="reference")
    sp.add_argument("--inflation", default=None)
    sp.add_argument("--fps", type=float, default=16.0)
    sp.add_argument("--table", action="store_true", help="also print a human table to stderr")
    sp.set_defaults(func=_cmd_cost)

    sp = sub.add_parser("train", help="train the counting head on the synthetic task")
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--scheme", type=int, choices=(1, 2, 3), default=3)
    sp.add_argument("--steps", type=int, default=150)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--batch-size", type=int, default=2, dest="batch_size")
    sp.add_argument("--k", type=int, default=None, help="train only the k final layers")
    sp.add_argument("--train-clips", type=int, default=24, dest="train_clips")
    sp.add_argument("--eval-clips", type=int, default=16, dest="eval_clips")
    sp.add_argument("--reset-at-boundary", action="store_true", dest="reset_at_boundary")
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.add_argument("--log", default=None, help="JSON-lines training log path")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on synthetic clips")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scheme", type=int, choices=(1, 2, 3), default=None)
    sp.add_argument("--eval-clips", type=int, default=16, dest="eval_clips")
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("manifest-validate", help="validate a dataset manifest")
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=_cmd_manifest_validate)

    sp = sub.add_parser("fewshot-sample", help="subsample the train split per class")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_fewshot_sample)

    sp = sub.add_parser("pose", help="pose layout utilities")
    pose_sub = sp.add_subparsers(dest="pose_action", required=True)
    spm = pose_sub.add_parser("map", help="remap blazepose33 to openpose18")
    spm.add_argument("--input", required=True)
    spm.add_argument("--out", required=True)
    spm.set_defaults(func=_cmd_pose)
    spa = pose_sub.add_parser("adjacency", help="spatial partition matrices for a layout")
    spa.add_argument("--layout", choices=sorted(posekit.LAYOUT_FILES), required=True)
    spa.add_argument("--max-hop", type=int, default=1, dest="max_hop")
    spa.set_defaults(func=_cmd_pose)
    spg = pose_sub.add_parser("augment", help="simulated camera motion augmentation")
    spg.add_argument("--input", required=True)
    spg.add_argument("--out", required=True)
    spg.add_argument("--rotation", type=float, default=10.0)
    spg.add_argument("--translation", type=float, default=0.05)
    spg.add_argument("--scale", type=float, default=0.1)
    spg.add_argument("--seed", type=int, default=_default_seed())
    spg.set_defaults(func=_cmd_pose)

    sp = sub.add_parser("densify", help="expand an event track into per-step labels")
    sp.add_argument("--events", required=True)
    sp.add_argument("--scheme", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.set_defaults(func=_cmd_densify)

    sp = sub.add_parser("decode-count", help="decode labels or probabilities into a count")
    sp.add_argument("--labels", default=None, help="JSON file with a label id array")
    sp.add_argument("--probs", default=None, help="JSON-lines probabilities, '-' for stdin")
    sp.add_argument("--scheme", type=int, choices=(1, 2, 3), required=True)
    sp.set_defaults(func=_cmd_decode_count)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "decode-count" and not (args.labels or args.probs):
            raise ContractError("decode-count needs --labels or --probs")
        return args.func(args)
    except (ContractError, ConfigurationError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ManifestError):
            for v in exc.violations:
                print(f"  violation: {v}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
