#!/usr/bin/env python3
"""Command-line entry point: `mixsegdec <command> [options]`"""
import logging
import re
import sys
from argparse import ArgumentParser, RawDescriptionHelpFormatter
from textwrap import dedent

import shtab
import yaml
from argopt import argopt

from .utils import UsageError, to_plain

try:
    from . import __version__
except ImportError:
    __version__ = ""

log = logging.getLogger(__name__)
RE_DEFAULT = re.compile(r"\[default: None:.*?\]", flags=re.M)
RE_PRECOLON = re.compile(r"^\s*:\s*", flags=re.M)


class MyParser(ArgumentParser):
    def add_argument(self, *args, **kwargs):
        if 'help' in kwargs:
            kwargs['help'] = RE_PRECOLON.sub("", RE_DEFAULT.sub("", kwargs['help']))
        log.debug("%r, %r", args, kwargs)
        return super(MyParser, self).add_argument(*args, **kwargs)


class Func(object):
    def __init__(self, func, doc, version=None, argparser=MyParser,
                 formatter_class=RawDescriptionHelpFormatter):
        """
        Args:
          func (callable):  e.g. `mixsegdec.synth.run`
          doc (str): an `argopt`-compatible docstring for `func`
          version (str): optional
        """
        self.parser = argopt(dedent(doc), argparser=argparser, formatter_class=formatter_class,
                             version=version)
        self.parser.set_defaults(run__=func)

    def option(self, dest):
        return next(i for i in self.parser._get_optional_actions() if i.dest == dest)


def get_main_parser(argparser=MyParser):
    from . import ablate, crossval, evaluate, report, sweep, synth, train
    from .datasets import FORMATS

    def fix_subparser(subparser):
        subparser.add_argument("--dry-run", action="store_true",
                               help="print resolved options and exit without running")
        return subparser

    parser = fix_subparser(argparser(prog="mixsegdec"))
    subparsers = parser.add_subparsers(help="command to run", dest="command", required=True)
    subparser = subparsers.add_parser("completion", help="Print tab completion scripts")
    shtab.add_argument_to(subparser, "shell", parent=parser)

    def argparser(prog, description=None, epilog=None, formatter_class=None):
        """handle (prog, description, epilog) => (title, help)"""
        return fix_subparser(
            subparsers.add_parser(
                prog, help=(description or "").strip().split("\n")[0],
                description="\n".join([description or "", epilog or ""]).strip(),
                formatter_class=formatter_class or RawDescriptionHelpFormatter))

    Func(synth.run, synth.__doc__, version=__version__, argparser=argparser)
    for mod in (train, crossval, ablate, sweep):
        func = Func(mod.run, mod.__doc__, version=__version__, argparser=argparser)
        func.option("dataset").choices = sorted(FORMATS)
        func.option("preset").choices = sorted(train.PRESETS)
    func = Func(evaluate.run, evaluate.__doc__, version=__version__, argparser=argparser)
    func.option("dataset").choices = sorted(FORMATS)
    Func(report.run, report.__doc__, version=__version__, argparser=argparser)
    return parser


def main(args=None):
    """
    Returns:
      exit code: 0 on success, 1 on a failed run, 2 on a usage error
    """
    logging.basicConfig(level=logging.INFO)
    parser = get_main_parser()
    if args is None:
        args = sys.argv[1:]
    try:
        opts = parser.parse_args(args=args)
    except SystemExit as exc: # --help, --version, completion, usage errors
        return exc.code if isinstance(exc.code, int) else int(exc.code is not None)
    kwargs = {k: v
              for (k, v) in opts._get_kwargs()
              if k not in ("dry_run", "run__", "command")} # strip opts

    if opts.dry_run:
        print(yaml.safe_dump(to_plain({'command': opts.command, 'options': kwargs}),
                             sort_keys=True, default_flow_style=False), end="")
        return 0
    try:
        res = opts.run__(*opts._get_args(), **kwargs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error("%s: %s", opts.command, exc)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", opts.command, exc)
        log.debug("traceback", exc_info=True)
        return 1
    if res is not None:
        print(yaml.safe_dump(to_plain(res), sort_keys=True).strip()
              if isinstance(res, dict) else res)
    return 0


if __name__ == "__main__": # pragma: no cover
    sys.exit(main())
