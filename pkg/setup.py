"""Use this file to install nlc_lab as a module"""

from typing import List

from setuptools import find_packages, setup


def prod_dependencies() -> List[str]:
    """
    Pull the dependencies from the requirements dir
    :return: Each of the newlines, strings of the dependencies
    """
    with open("./requirements/prod.txt", "r") as file:
        return file.read().splitlines()


setup(
    name="nlc_lab",
    version="0.1.0",
    description=(
        "Noise level correction for diffusion samplers, trained and evaluated on a toy manifold."
    ),
    packages=find_packages(exclude=("test", "test.*")),
    python_requires=">=3.11",
    install_requires=prod_dependencies(),
    entry_points={"console_scripts": ["nlc-lab=nlc_lab.cli:main"]},
)
