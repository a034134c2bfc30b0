import pathlib
import pkg_resources
from setuptools import setup, find_packages


PKG_NAME = "probeplane"
VERSION = "0.1"
EXTRAS = {
    "test": ["pytest", "pytest-asyncio"],
}


def _read_file(fname):
    with pathlib.Path(fname).open(encoding="utf-8") as fp:
        return fp.read()


def _read_install_requires():
    with pathlib.Path("requirements.txt").open() as fp:
        return [
            str(requirement) for requirement in pkg_resources.parse_requirements(fp)
        ]


def _fill_extras(extras):
    if extras:
        extras["all"] = list(set([item for group in extras.values() for item in group]))
    return extras


setup(
    name="probeplane-gym",
    version=VERSION,
    description="Dynamic network probes on a simulated programmable data plane",
    long_description=_read_file("README.md"),
    long_description_content_type="text/markdown",
    keywords=[
        "Programmable Data Plane",
        "Network Telemetry",
        "Match-Action Pipeline",
        "Network Simulation",
    ],
    license="MIT License",
    packages=find_packages(include=[PKG_NAME, f"{PKG_NAME}.*"]),
    package_data={PKG_NAME: ["environments/*.json"]},
    include_package_data=True,
    zip_safe=False,
    install_requires=_read_install_requires(),
    extras_require=_fill_extras(EXTRAS),
    entry_points={"console_scripts": ["probe-console=probeplane.cli:main"]},
    python_requires=">=3.9",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Topic :: System :: Networking :: Monitoring",
        "Environment :: Console",
        "Programming Language :: Python :: 3.9",
    ],
)
