"""
A noxfile that lints, builds and tests the r3-captioner
package.

Typical Usage:

$ nox -s lint build test
$ nox -s test -- --runslow
"""

from pathlib import Path

import nox


@nox.session
def lint(session):
    """
    Lints the source code using pre-commit. Refer to
    .pre-commit-config.yaml to see which tools are being
    run against the source code.
    """

    session.install("pre-commit")
    session.run("pre-commit", "run", "--all-files")


@nox.session
def build(session):
    """
    Builds an sdist and a wheel into the dist directory after
    removing stale ones.
    """

    dist_path = Path(Path.cwd(), "dist")
    dist_path.mkdir(exist_ok=True)

    for stale in dist_path.iterdir():
        stale.unlink()

    session.install("build")

    session.run("python3", "-m", "build", "--sdist")
    session.run("python3", "-m", "build", "--wheel")


@nox.session
def test(session):
    """
    Installs the built wheel and runs the test suite under
    coverage. Extra arguments go to pytest, so --runslow
    enables the experiment-scale checks.
    """

    wheels = list(Path(Path.cwd(), "dist").glob("*.whl"))

    if len(wheels) != 1:
        raise ValueError(f"{len(wheels)} wheels found. Expected 1.")

    session.install(wheels[0])
    session.install("coverage", "pytest")

    session.run(
        "coverage", "run", "--source", "r3_captioner", "-m", "pytest", "-v", *session.posargs
    )
    session.run("coverage", "report")
